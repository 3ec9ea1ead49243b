//! Request body views addressed by dotted paths.
//!
//! JSON bodies are used as-is. Form bodies are folded into the same tree using
//! the usual bracket convention, so `token[scopes][]=api` and
//! `{"token": {"scopes": ["api"]}}` both answer `token.scopes`.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

/// Bodies larger than this are never parsed.
pub const MAX_PARSED_BODY: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum BodyView {
    /// No body was sent.
    Absent,
    Parsed(Json),
    /// A body was sent but could not be read as JSON or a form.
    Unparseable,
}

impl BodyView {
    pub fn from_bytes(content_type: Option<&str>, bytes: &[u8]) -> BodyView {
        if bytes.is_empty() {
            return BodyView::Absent;
        }
        if bytes.len() > MAX_PARSED_BODY {
            return BodyView::Unparseable;
        }
        let ct = content_type
            .map(|c| c.split(';').next().unwrap_or("").trim().to_ascii_lowercase())
            .unwrap_or_default();
        let json = || serde_json::from_slice::<Json>(bytes).ok();
        let form = || std::str::from_utf8(bytes).ok().map(parse_form);
        let parsed = if ct == "application/json" || ct.ends_with("+json") {
            json()
        } else if ct == "application/x-www-form-urlencoded" {
            form()
        } else {
            json().or_else(form)
        };
        match parsed {
            Some(v) => BodyView::Parsed(v),
            None => BodyView::Unparseable,
        }
    }

    pub fn lookup(&self, path: &str) -> Option<&Json> {
        match self {
            BodyView::Parsed(v) => lookup_path(v, path),
            _ => None,
        }
    }
}

/// Walks a dotted path. Numeric segments index arrays.
pub fn lookup_path<'a>(root: &'a Json, path: &str) -> Option<&'a Json> {
    path.split('.').try_fold(root, |node, seg| match node {
        Json::Object(m) => m.get(seg),
        Json::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

/// Checks that `path` is a non-empty dotted path with no empty segments.
pub fn valid_body_path(path: &str) -> bool {
    !path.is_empty() && path.split('.').all(|s| !s.is_empty())
}

fn parse_form(text: &str) -> Json {
    let mut root = Map::new();
    for (key, value) in form_urlencoded::parse(text.as_bytes()) {
        let (segments, append) = split_bracket_key(&key);
        insert(&mut root, &segments, append, Json::String(value.into_owned()));
    }
    Json::Object(root)
}

/// `a[b][c][]` → (["a","b","c"], true)
fn split_bracket_key(key: &str) -> (Vec<String>, bool) {
    let Some(open) = key.find('[') else {
        return (vec![key.to_owned()], false);
    };
    let mut segments = vec![key[..open].to_owned()];
    let mut append = false;
    let mut rest = &key[open..];
    while let Some(stripped) = rest.strip_prefix('[') {
        let Some(close) = stripped.find(']') else {
            // Unbalanced; treat the whole key literally.
            return (vec![key.to_owned()], false);
        };
        let seg = &stripped[..close];
        rest = &stripped[close + 1..];
        if seg.is_empty() {
            append = true;
            break;
        }
        segments.push(seg.to_owned());
    }
    (segments, append)
}

fn insert(map: &mut Map<String, Json>, segments: &[String], append: bool, value: Json) {
    let (head, tail) = segments.split_first().expect("at least one segment");
    if tail.is_empty() {
        match map.get_mut(head) {
            Some(Json::Array(items)) => items.push(value),
            Some(existing) => {
                let prev = existing.take();
                *existing = Json::Array(vec![prev, value]);
            }
            None if append => {
                map.insert(head.clone(), Json::Array(vec![value]));
            }
            None => {
                map.insert(head.clone(), value);
            }
        }
        return;
    }
    let child = map
        .entry(head.clone())
        .or_insert_with(|| Json::Object(Map::new()));
    if !child.is_object() {
        *child = Json::Object(Map::new());
    }
    if let Json::Object(m) = child {
        insert(m, tail, append, value);
    }
}

/// One body condition attached to a sitemap matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyMatcher {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub present: Option<bool>,
}

impl BodyMatcher {
    pub fn validate(&self) -> Result<(), String> {
        if !valid_body_path(&self.path) {
            return Err(format!("invalid body path `{}`", self.path));
        }
        match (&self.equals, self.present) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(format!(
                "body matcher `{}` needs exactly one of `equals` or `present`",
                self.path
            )),
        }
    }

    pub fn matches(&self, body: &Json) -> bool {
        let found = lookup_path(body, &self.path);
        match (&self.equals, self.present) {
            (Some(expected), _) => found.is_some_and(|f| loosely_equal(f, expected)),
            (None, Some(want)) => found.is_some() == want,
            (None, None) => false,
        }
    }

    /// Whether no single body can satisfy both matchers.
    pub fn contradicts(&self, other: &BodyMatcher) -> bool {
        if self.path != other.path {
            return false;
        }
        let requires_presence = |m: &BodyMatcher| m.equals.is_some() || m.present == Some(true);
        match (&self.equals, &other.equals) {
            (Some(a), Some(b)) => !loosely_equal(a, b),
            _ => {
                (self.present == Some(false) && requires_presence(other))
                    || (other.present == Some(false) && requires_presence(self))
            }
        }
    }
}

/// Form fields arrive as strings, so `"1"` and `1` compare equal.
fn loosely_equal(a: &Json, b: &Json) -> bool {
    if a == b {
        return true;
    }
    match (a, b) {
        (Json::String(s), other) | (other, Json::String(s)) if !other.is_string() => {
            match other {
                Json::Number(_) | Json::Bool(_) => *s == other.to_string(),
                _ => false,
            }
        }
        _ => false,
    }
}
