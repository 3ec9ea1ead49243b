//! URL patterns with `*` wildcards.
//!
//! A pattern is `scheme://host[:port]/path[?query]`. A `*` matches any run of
//! characters other than `?` and `#`, so a wildcard never silently swallows a
//! query string. Scheme and host compare case-insensitively, the path is
//! case-sensitive, and the request's query string only takes part in matching
//! when the pattern itself contains a `?`.
//!
//! `*` is accepted only as a whole path segment (`/x/*/y`, `/x/*`), as the
//! final character of the pattern (`/view.html*`), or as a whole query value
//! (`?page=*&sort=asc`).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid url pattern `{pattern}`: {reason}")]
pub struct PatternSyntaxError {
    pub pattern: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid url `{url}`: {reason}")]
pub struct UrlError {
    pub url: String,
    pub reason: String,
}

/// An absolute request URL split into the parts the matcher cares about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedUrl {
    pub scheme: String,
    /// Lower-cased host, with `:port` when the port is not the scheme default.
    pub host: String,
    /// Path starting with `/`.
    pub path: String,
    pub query: Option<String>,
}

impl ParsedUrl {
    pub fn parse(url: &str) -> Result<ParsedUrl, UrlError> {
        let err = |reason: &str| UrlError {
            url: url.to_owned(),
            reason: reason.to_owned(),
        };
        let (scheme, rest) = url.split_once("://").ok_or_else(|| err("missing scheme"))?;
        let scheme = scheme.to_ascii_lowercase();
        if scheme != "http" && scheme != "https" {
            return Err(err("scheme must be http or https"));
        }
        let rest = rest.split('#').next().unwrap_or_default();
        let auth_end = rest.find(['/', '?']).unwrap_or(rest.len());
        let authority = &rest[..auth_end];
        let after = &rest[auth_end..];
        let hostport = authority.rsplit('@').next().unwrap_or_default();
        let host = normalize_host(&scheme, hostport).ok_or_else(|| err("invalid host"))?;
        let (path, query) = match after.split_once('?') {
            Some((p, q)) => (p, Some(q.to_owned())),
            None => (after, None),
        };
        let path = if path.is_empty() { "/".to_owned() } else { path.to_owned() };
        Ok(ParsedUrl {
            scheme,
            host,
            path,
            query,
        })
    }

    /// Host without the port.
    pub fn hostname(&self) -> &str {
        host_without_port(&self.host)
    }

    /// First path segment, used as an index key.
    pub fn first_segment(&self) -> &str {
        let p = &self.path[1..];
        &p[..p.find('/').unwrap_or(p.len())]
    }

    pub fn query_pairs(&self) -> impl Iterator<Item = (String, String)> + '_ {
        form_urlencoded::parse(self.query.as_deref().unwrap_or("").as_bytes())
            .map(|(k, v)| (k.into_owned(), v.into_owned()))
    }
}

impl fmt::Display for ParsedUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}{}", self.scheme, self.host, self.path)?;
        if let Some(q) = &self.query {
            write!(f, "?{q}")?;
        }
        Ok(())
    }
}

pub(crate) fn host_without_port(host: &str) -> &str {
    match host.rsplit_once(':') {
        Some((h, port)) if port.bytes().all(|b| b.is_ascii_digit()) => h,
        _ => host,
    }
}

fn valid_hostname(h: &str) -> bool {
    !h.is_empty()
        && h.len() <= 253
        && h.split('.').all(|label| {
            !label.is_empty()
                && label.len() <= 63
                && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
        })
}

fn normalize_host(scheme: &str, hostport: &str) -> Option<String> {
    let hostport = hostport.to_ascii_lowercase();
    let (host, port) = match hostport.rsplit_once(':') {
        Some((h, p)) => (h.to_owned(), Some(p.to_owned())),
        None => (hostport.clone(), None),
    };
    if !valid_hostname(&host) {
        return None;
    }
    match port {
        None => Some(host),
        Some(p) => {
            let n: u16 = p.parse().ok()?;
            let default = if scheme == "https" { 443 } else { 80 };
            if n == default {
                Some(host)
            } else {
                Some(format!("{host}:{n}"))
            }
        }
    }
}

/// A compiled URL pattern.
#[derive(Clone)]
pub struct UrlPattern {
    raw: String,
    scheme: String,
    host: String,
    /// Everything after the host, split on `?`.
    pieces: Vec<String>,
}

impl UrlPattern {
    pub fn parse(raw: &str) -> Result<UrlPattern, PatternSyntaxError> {
        let err = |reason: &str| PatternSyntaxError {
            pattern: raw.to_owned(),
            reason: reason.to_owned(),
        };
        let (scheme, rest) = raw.split_once("://").ok_or_else(|| err("missing scheme"))?;
        let scheme = scheme.to_ascii_lowercase();
        if scheme != "http" && scheme != "https" {
            return Err(err("scheme must be http or https"));
        }
        if rest.contains('#') {
            return Err(err("fragments are not allowed"));
        }
        let slash = rest.find('/').ok_or_else(|| err("pattern must include a path"))?;
        let (authority, tail) = rest.split_at(slash);
        if authority.contains(['*', '@', '?']) {
            return Err(err("host must be literal"));
        }
        let host = normalize_host(&scheme, authority).ok_or_else(|| err("invalid host"))?;
        if tail.contains("**") {
            return Err(err("adjacent wildcards"));
        }
        let bytes = tail.as_bytes();
        let query_start = tail.find('?');
        for (i, b) in bytes.iter().enumerate() {
            if *b != b'*' {
                continue;
            }
            let last = i + 1 == bytes.len();
            let prev = bytes[i - 1];
            let next = bytes.get(i + 1).copied();
            let in_query = query_start.is_some_and(|q| i > q);
            let ok = if last {
                true
            } else if in_query {
                prev == b'=' && next == Some(b'&')
            } else {
                prev == b'/' && matches!(next, Some(b'/') | Some(b'?'))
            };
            if !ok {
                return Err(err(
                    "`*` must be a whole path segment, a whole query value, or the final character",
                ));
            }
        }
        Ok(UrlPattern {
            raw: raw.to_owned(),
            scheme,
            host,
            pieces: tail.split('?').map(str::to_owned).collect(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    /// Lower-cased host including a non-default port.
    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn hostname(&self) -> &str {
        host_without_port(&self.host)
    }

    pub fn has_query(&self) -> bool {
        self.pieces.len() > 1
    }

    /// The first path segment if it is fully literal, for indexing.
    pub fn literal_first_segment(&self) -> Option<&str> {
        let path = &self.pieces[0][1..];
        let end = path.find('/');
        let seg = &path[..end.unwrap_or(path.len())];
        if seg.contains('*') {
            return None;
        }
        Some(seg)
    }

    pub fn matches_str(&self, url: &str) -> Result<bool, UrlError> {
        Ok(self.matches(&ParsedUrl::parse(url)?))
    }

    pub fn matches(&self, url: &ParsedUrl) -> bool {
        if url.scheme != self.scheme || url.host != self.host {
            return false;
        }
        if !self.has_query() {
            return glob(self.pieces[0].as_bytes(), url.path.as_bytes());
        }
        let mut target = url.path.clone();
        if let Some(q) = &url.query {
            target.push('?');
            target.push_str(q);
        }
        let parts: Vec<&str> = target.split('?').collect();
        parts.len() == self.pieces.len()
            && self
                .pieces
                .iter()
                .zip(parts)
                .all(|(p, s)| glob(p.as_bytes(), s.as_bytes()))
    }

    /// Whether some URL is matched by both patterns.
    pub fn overlaps(&self, other: &UrlPattern) -> bool {
        if self.scheme != other.scheme || self.host != other.host {
            return false;
        }
        match (self.has_query(), other.has_query()) {
            (false, false) | (true, true) => {
                self.pieces.len() == other.pieces.len()
                    && self
                        .pieces
                        .iter()
                        .zip(&other.pieces)
                        .all(|(a, b)| globs_intersect(a.as_bytes(), b.as_bytes()))
            }
            // The query-free side ignores whatever query the URL carries, so
            // only the path parts need a common word.
            _ => globs_intersect(self.pieces[0].as_bytes(), other.pieces[0].as_bytes()),
        }
    }
}

impl fmt::Debug for UrlPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UrlPattern({:?})", self.raw)
    }
}

impl fmt::Display for UrlPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl PartialEq for UrlPattern {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}

impl Eq for UrlPattern {}

impl FromStr for UrlPattern {
    type Err = PatternSyntaxError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UrlPattern::parse(s)
    }
}

impl Serialize for UrlPattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for UrlPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        UrlPattern::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Matches `text` (which holds no `?`) against a glob piece.
fn glob(pattern: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let mut backtrack: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pattern.len() && pattern[p] == b'*' {
            backtrack = Some((p, t));
            p += 1;
        } else if p < pattern.len() && pattern[p] == text[t] {
            p += 1;
            t += 1;
        } else if let Some((sp, st)) = backtrack {
            p = sp + 1;
            t = st + 1;
            backtrack = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pattern[p..].iter().all(|b| *b == b'*')
}

/// Whether two `?`-free glob pieces share a matching word.
fn globs_intersect(a: &[u8], b: &[u8]) -> bool {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), bool>) -> bool {
        if let Some(v) = memo.get(&(i, j)) {
            return *v;
        }
        let r = match (a.get(i), b.get(j)) {
            (None, None) => true,
            (Some(b'*'), _) if go(a, b, i + 1, j, memo) => true,
            (_, Some(b'*')) if go(a, b, i, j + 1, memo) => true,
            (Some(b'*'), Some(b'*')) => false,
            // A star consumes one literal character of the other side.
            (Some(b'*'), Some(_)) => go(a, b, i, j + 1, memo),
            (Some(_), Some(b'*')) => go(a, b, i + 1, j, memo),
            (Some(x), Some(y)) => x == y && go(a, b, i + 1, j + 1, memo),
            _ => false,
        };
        memo.insert((i, j), r);
        r
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Convenience wrapper: parse both sides and match.
pub fn pattern_matches(pattern: &str, url: &str) -> Result<bool, PatternSyntaxError> {
    let p = UrlPattern::parse(pattern)?;
    p.matches_str(url).map_err(|e| PatternSyntaxError {
        pattern: url.to_owned(),
        reason: e.reason,
    })
}
