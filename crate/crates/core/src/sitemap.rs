//! Agent sitemaps: the developer-published mapping from HTTP request shapes to
//! named, security-relevant actions on one web domain.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::body::{valid_body_path, BodyMatcher, BodyView};
use crate::pattern::{PatternSyntaxError, UrlPattern};
use crate::request::RequestView;
use crate::value::{Value, ValueMap, ValueType};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SitemapError {
    #[error("sitemap schema error: {0}")]
    Schema(String),
    #[error("sitemap entries `{first}` and `{second}` can match the same request")]
    Overlap { first: String, second: String },
    #[error("pattern host `{host}` in `{action}` is outside domain `{domain}`")]
    Host {
        action: String,
        host: String,
        domain: String,
    },
    #[error(transparent)]
    Pattern(#[from] PatternSyntaxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Get,
    Post,
    Put,
    Patch,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Patch => "PATCH",
            Method::Delete => "DELETE",
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Ok(Method::Get),
            "POST" => Ok(Method::Post),
            "PUT" => Ok(Method::Put),
            "PATCH" => Ok(Method::Patch),
            "DELETE" => Ok(Method::Delete),
            other => Err(format!("unsupported method `{other}`")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpMatcher {
    pub method: Method,
    pub url_pattern: UrlPattern,
    pub body: Vec<BodyMatcher>,
}

/// Outcome of testing one matcher against one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchState {
    No,
    Yes,
    /// Method and URL match but the body matchers could not be checked.
    BodyUnknown,
}

impl HttpMatcher {
    pub fn check(&self, req: &RequestView) -> MatchState {
        if !req.method.eq_ignore_ascii_case(self.method.as_str()) || !self.url_pattern.matches(&req.url) {
            return MatchState::No;
        }
        if self.body.is_empty() {
            return MatchState::Yes;
        }
        let empty = serde_json::Value::Null;
        let body = match &req.body {
            BodyView::Parsed(v) => v,
            BodyView::Absent => &empty,
            BodyView::Unparseable => return MatchState::BodyUnknown,
        };
        if self.body.iter().all(|m| m.matches(body)) {
            MatchState::Yes
        } else {
            MatchState::No
        }
    }

    /// Whether some single request could satisfy both matchers.
    pub fn overlaps(&self, other: &HttpMatcher) -> bool {
        self.method == other.method
            && self.url_pattern.overlaps(&other.url_pattern)
            && !self
                .body
                .iter()
                .any(|a| other.body.iter().any(|b| a.contradicts(b)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArgSource {
    RequestBody { path: String },
    RequestQuery { key: String },
    /// Read from the page DOM by an in-page observer while the browser is on a
    /// page matching `url`.
    Dom { url: UrlPattern, selector: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArgSpec {
    pub name: String,
    pub source: ArgSource,
    pub value_type: ValueType,
}

impl ArgSpec {
    pub fn is_request_sourced(&self) -> bool {
        !matches!(self.source, ArgSource::Dom { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitemapEntry {
    pub matcher: HttpMatcher,
    pub semantic_action: String,
    pub description: String,
    pub args: Vec<ArgSpec>,
}

impl SitemapEntry {
    /// Whether deciding on this entry depends on the request body.
    pub fn needs_body(&self) -> bool {
        !self.matcher.body.is_empty()
            || self
                .args
                .iter()
                .any(|a| matches!(a.source, ArgSource::RequestBody { .. }))
    }

    pub fn arg(&self, name: &str) -> Option<&ArgSpec> {
        self.args.iter().find(|a| a.name == name)
    }

    /// Pulls the request-sourced arguments out of `req`. Values that are
    /// present but do not convert to the declared type land in the error map.
    pub fn extract_request_args(&self, req: &RequestView) -> (ValueMap, BTreeMap<String, String>) {
        let mut values = ValueMap::new();
        let mut errors = BTreeMap::new();
        for spec in &self.args {
            let raw = match &spec.source {
                ArgSource::RequestBody { path } => req.body.lookup(path).cloned(),
                ArgSource::RequestQuery { key } => {
                    let found: Vec<String> = req
                        .url
                        .query_pairs()
                        .filter(|(k, _)| k == key)
                        .map(|(_, v)| v)
                        .collect();
                    match (spec.value_type, found.len()) {
                        (_, 0) => None,
                        (ValueType::StringList, _) => Some(serde_json::json!(found)),
                        _ => Some(serde_json::Value::String(found[0].clone())),
                    }
                }
                ArgSource::Dom { .. } => continue,
            };
            if let Some(raw) = raw {
                match Value::from_json_lenient(&raw, spec.value_type) {
                    Ok(v) => {
                        values.insert(spec.name.clone(), v);
                    }
                    Err(e) => {
                        errors.insert(spec.name.clone(), e.to_string());
                    }
                }
            }
        }
        (values, errors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sitemap {
    pub domain: String,
    pub version: u64,
    pub entries: Vec<SitemapEntry>,
}

/// A request resolved to a sitemap action.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticHit {
    pub entry: usize,
    pub semantic_action: String,
    pub args: ValueMap,
    pub arg_errors: BTreeMap<String, String>,
    pub body_unparsed: bool,
}

impl Sitemap {
    pub fn entry(&self, action: &str) -> Option<&SitemapEntry> {
        self.entries.iter().find(|e| e.semantic_action == action)
    }

    pub fn has_action(&self, action: &str) -> bool {
        self.entry(action).is_some()
    }

    /// Whether `host` (no port) is the sitemap domain or one of its subdomains.
    pub fn covers_host(&self, host: &str) -> bool {
        host_in_domain(host, &self.domain)
    }

    /// Every DOM-sourced argument with the page pattern that produces it.
    pub fn dom_args(&self) -> impl Iterator<Item = (&str, ValueType, &UrlPattern)> {
        self.entries.iter().flat_map(|e| {
            e.args.iter().filter_map(|a| match &a.source {
                ArgSource::Dom { url, .. } => Some((a.name.as_str(), a.value_type, url)),
                _ => None,
            })
        })
    }

    /// Linear scan for the entry covering `req`.
    pub fn match_request(&self, req: &RequestView) -> Option<SemanticHit> {
        let mut unknown = None;
        for (i, entry) in self.entries.iter().enumerate() {
            match entry.matcher.check(req) {
                MatchState::Yes => return Some(self.hit(i, req, false)),
                MatchState::BodyUnknown if unknown.is_none() => unknown = Some(i),
                _ => {}
            }
        }
        unknown.map(|i| self.hit(i, req, true))
    }

    pub(crate) fn hit(&self, i: usize, req: &RequestView, body_unknown: bool) -> SemanticHit {
        let entry = &self.entries[i];
        let (args, arg_errors) = entry.extract_request_args(req);
        SemanticHit {
            entry: i,
            semantic_action: entry.semantic_action.clone(),
            args,
            arg_errors,
            body_unparsed: body_unknown || matches!(req.body, BodyView::Unparseable),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(SitemapDoc::from(self)).expect("sitemap serializes")
    }
}

impl Serialize for Sitemap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SitemapDoc::from(self).serialize(s)
    }
}

pub fn host_in_domain(host: &str, domain: &str) -> bool {
    let host = host.trim_end_matches('.');
    host.eq_ignore_ascii_case(domain)
        || (host.len() > domain.len()
            && host.as_bytes()[host.len() - domain.len() - 1] == b'.'
            && host[host.len() - domain.len()..].eq_ignore_ascii_case(domain))
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub(crate) fn is_domain_name(s: &str) -> bool {
    !s.is_empty()
        && s.contains('.')
        && s.split('.').all(|l| {
            !l.is_empty() && l.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SitemapDoc {
    domain: String,
    version: u64,
    sitemap: Vec<EntryDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    method: String,
    url_pattern: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    body: Vec<BodyMatcher>,
    semantic_action: String,
    description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    args: Vec<ArgDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArgDoc {
    name: String,
    #[serde(rename = "type")]
    value_type: ValueType,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    selector: Option<String>,
}

impl From<&Sitemap> for SitemapDoc {
    fn from(s: &Sitemap) -> Self {
        SitemapDoc {
            domain: s.domain.clone(),
            version: s.version,
            sitemap: s
                .entries
                .iter()
                .map(|e| EntryDoc {
                    method: e.matcher.method.to_string(),
                    url_pattern: e.matcher.url_pattern.to_string(),
                    body: e.matcher.body.clone(),
                    semantic_action: e.semantic_action.clone(),
                    description: e.description.clone(),
                    args: e.args.iter().map(ArgDoc::from).collect(),
                })
                .collect(),
        }
    }
}

impl From<&ArgSpec> for ArgDoc {
    fn from(a: &ArgSpec) -> Self {
        let mut doc = ArgDoc {
            name: a.name.clone(),
            value_type: a.value_type,
            source: String::new(),
            path: None,
            key: None,
            url: None,
            selector: None,
        };
        match &a.source {
            ArgSource::RequestBody { path } => {
                doc.source = "request_body".into();
                doc.path = Some(path.clone());
            }
            ArgSource::RequestQuery { key } => {
                doc.source = "request_query".into();
                doc.key = Some(key.clone());
            }
            ArgSource::Dom { url, selector } => {
                doc.source = "dom".into();
                doc.url = Some(url.to_string());
                doc.selector = Some(selector.clone());
            }
        }
        doc
    }
}

fn arg_from_doc(doc: ArgDoc, action: &str) -> Result<ArgSpec, SitemapError> {
    let schema = |msg: String| SitemapError::Schema(format!("{action}.args.{}: {msg}", doc.name));
    if !is_identifier(&doc.name) {
        return Err(schema("argument name must be an identifier".into()));
    }
    let source = match doc.source.as_str() {
        "request_body" => {
            if doc.key.is_some() || doc.url.is_some() || doc.selector.is_some() {
                return Err(schema("request_body takes only `path`".into()));
            }
            let path = doc.path.clone().ok_or_else(|| schema("missing `path`".into()))?;
            if !valid_body_path(&path) {
                return Err(schema(format!("invalid body path `{path}`")));
            }
            ArgSource::RequestBody { path }
        }
        "request_query" => {
            if doc.path.is_some() || doc.url.is_some() || doc.selector.is_some() {
                return Err(schema("request_query takes only `key`".into()));
            }
            let key = doc.key.clone().filter(|k| !k.is_empty());
            ArgSource::RequestQuery {
                key: key.ok_or_else(|| schema("missing `key`".into()))?,
            }
        }
        "dom" => {
            if doc.path.is_some() || doc.key.is_some() {
                return Err(schema("dom takes `url` and `selector`".into()));
            }
            let url = doc.url.as_deref().ok_or_else(|| schema("missing `url`".into()))?;
            let selector = doc
                .selector
                .clone()
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| schema("missing or empty `selector`".into()))?;
            ArgSource::Dom {
                url: UrlPattern::parse(url)?,
                selector,
            }
        }
        other => return Err(schema(format!("unknown source `{other}`"))),
    };
    Ok(ArgSpec {
        name: doc.name,
        source,
        value_type: doc.value_type,
    })
}

fn check_host(pattern: &UrlPattern, action: &str, domain: &str) -> Result<(), SitemapError> {
    if host_in_domain(pattern.hostname(), domain) {
        Ok(())
    } else {
        Err(SitemapError::Host {
            action: action.to_owned(),
            host: pattern.hostname().to_owned(),
            domain: domain.to_owned(),
        })
    }
}

/// Parses and validates a sitemap document.
pub fn parse_sitemap(bytes: &[u8]) -> Result<Sitemap, SitemapError> {
    let doc: SitemapDoc =
        serde_json::from_slice(bytes).map_err(|e| SitemapError::Schema(e.to_string()))?;
    let domain = doc.domain.trim().to_owned();
    if !is_domain_name(&domain) {
        return Err(SitemapError::Schema(format!(
            "`{domain}` is not a lower-case domain name"
        )));
    }
    let mut entries = Vec::with_capacity(doc.sitemap.len());
    let mut seen = HashSet::new();
    for e in doc.sitemap {
        let action = e.semantic_action;
        if !is_identifier(&action) {
            return Err(SitemapError::Schema(format!(
                "semantic_action `{action}` must match [A-Za-z][A-Za-z0-9_]*"
            )));
        }
        if !seen.insert(action.clone()) {
            return Err(SitemapError::Schema(format!("duplicate semantic_action `{action}`")));
        }
        if e.description.trim().is_empty() {
            return Err(SitemapError::Schema(format!("{action}: empty description")));
        }
        let method = e
            .method
            .parse::<Method>()
            .map_err(|m| SitemapError::Schema(format!("{action}: {m}")))?;
        let url_pattern = UrlPattern::parse(&e.url_pattern)?;
        check_host(&url_pattern, &action, &domain)?;
        for m in &e.body {
            m.validate()
                .map_err(|msg| SitemapError::Schema(format!("{action}: {msg}")))?;
        }
        let mut names = HashSet::new();
        let mut args = Vec::with_capacity(e.args.len());
        for a in e.args {
            if !names.insert(a.name.clone()) {
                return Err(SitemapError::Schema(format!(
                    "{action}: duplicate argument `{}`",
                    a.name
                )));
            }
            let spec = arg_from_doc(a, &action)?;
            if let ArgSource::Dom { url, .. } = &spec.source {
                check_host(url, &action, &domain)?;
            }
            args.push(spec);
        }
        entries.push(SitemapEntry {
            matcher: HttpMatcher {
                method,
                url_pattern,
                body: e.body,
            },
            semantic_action: action,
            description: e.description,
            args,
        });
    }
    for (i, a) in entries.iter().enumerate() {
        for b in &entries[i + 1..] {
            if a.matcher.overlaps(&b.matcher) {
                return Err(SitemapError::Overlap {
                    first: a.semantic_action.clone(),
                    second: b.semantic_action.clone(),
                });
            }
        }
    }
    Ok(Sitemap {
        domain,
        version: doc.version,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn doc(entries: serde_json::Value) -> Vec<u8> {
        serde_json::to_vec(&json!({"domain": "amazon.com", "version": 1, "sitemap": entries})).unwrap()
    }

    #[test]
    fn empty_sitemap_is_valid() {
        let s = parse_sitemap(&doc(json!([]))).unwrap();
        assert!(s.entries.is_empty());
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(
            parse_sitemap(br#"{"domain":"amazon.com","sitemap":[]}"#),
            Err(SitemapError::Schema(_))
        ));
        assert!(matches!(
            parse_sitemap(br#"{"domain":"amazon.com","version":1,"sitemap":[],"extra":1}"#),
            Err(SitemapError::Schema(_))
        ));
        let bad_method = doc(json!([{
            "method": "HEAD", "url_pattern": "https://www.amazon.com/x",
            "semantic_action": "X", "description": "x"
        }]));
        assert!(matches!(parse_sitemap(&bad_method), Err(SitemapError::Schema(_))));
        let bad_name = doc(json!([{
            "method": "GET", "url_pattern": "https://www.amazon.com/x",
            "semantic_action": "1X", "description": "x"
        }]));
        assert!(matches!(parse_sitemap(&bad_name), Err(SitemapError::Schema(_))));
        let empty_selector = doc(json!([{
            "method": "GET", "url_pattern": "https://www.amazon.com/x",
            "semantic_action": "X", "description": "x",
            "args": [{"name": "a", "type": "number", "source": "dom",
                      "url": "https://www.amazon.com/y*", "selector": " "}]
        }]));
        assert!(matches!(parse_sitemap(&empty_selector), Err(SitemapError::Schema(_))));
    }

    #[test]
    fn host_outside_domain() {
        let d = doc(json!([{
            "method": "GET", "url_pattern": "https://www.amazon.com.evil.io/x",
            "semantic_action": "X", "description": "x"
        }]));
        assert!(matches!(parse_sitemap(&d), Err(SitemapError::Host { .. })));
        assert!(host_in_domain("www.amazon.com", "amazon.com"));
        assert!(host_in_domain("amazon.com", "amazon.com"));
        assert!(!host_in_domain("notamazon.com", "amazon.com"));
    }

    #[test]
    fn body_discriminated_entries_coexist() {
        let d = doc(json!([
            {"method": "POST", "url_pattern": "https://www.amazon.com/cart/update",
             "body": [{"path": "op", "equals": "add"}],
             "semantic_action": "AddToCart", "description": "add"},
            {"method": "POST", "url_pattern": "https://www.amazon.com/cart/update",
             "body": [{"path": "op", "equals": "remove"}],
             "semantic_action": "RemoveFromCart", "description": "remove"}
        ]));
        let s = parse_sitemap(&d).unwrap();
        let req = RequestView::with_json("POST", "https://www.amazon.com/cart/update", &json!({"op": "remove"})).unwrap();
        assert_eq!(s.match_request(&req).unwrap().semantic_action, "RemoveFromCart");
        let bad = RequestView::new("POST", "https://www.amazon.com/cart/update", Some("application/json"), b"{").unwrap();
        let hit = s.match_request(&bad).unwrap();
        assert!(hit.body_unparsed);
    }

    #[test]
    fn query_args() {
        let d = doc(json!([{
            "method": "GET", "url_pattern": "https://www.amazon.com/s*",
            "semantic_action": "Search", "description": "search",
            "args": [{"name": "q", "type": "string", "source": "request_query", "key": "k"}]
        }]));
        let s = parse_sitemap(&d).unwrap();
        let hit = s
            .match_request(&RequestView::get("https://www.amazon.com/s?k=coffee+maker").unwrap())
            .unwrap();
        assert_eq!(hit.args["q"], Value::String("coffee maker".into()));
    }
}
