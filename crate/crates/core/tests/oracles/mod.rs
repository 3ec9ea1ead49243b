//! Independent reference implementations and generators used to cross-check
//! the engine. Shared by the property tests here and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cellgate_core::compiler::{Decision, DenyCause, Route};
use cellgate_core::sitemap::MatchState;
use cellgate_core::value::{Amount, Value, ValueMap};
use cellgate_core::{CompositePolicy, Effect, PolicySet, RequestView, Sitemap};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value as Json};

// ---------------------------------------------------------------- patterns

/// Escape the pattern, turn each `*` into `[^?#]*`, anchor, and compare
/// against the URL with its query removed unless the pattern has one.
pub fn regex_pattern_matches(pattern: &str, url: &str) -> bool {
    let lower_authority = |s: &str| -> String {
        let (scheme, rest) = s.split_once("://").unwrap();
        let cut = rest.find(['/', '?']).unwrap_or(rest.len());
        // An empty path is the root path.
        let slash = if rest[cut..].starts_with('/') { "" } else { "/" };
        format!("{}://{}{slash}{}", scheme.to_ascii_lowercase(), rest[..cut].to_ascii_lowercase(), &rest[cut..])
    };
    let pattern = lower_authority(pattern);
    let mut url = lower_authority(url.split('#').next().unwrap());
    if !pattern.contains('?') {
        if let Some(q) = url.find('?') {
            url.truncate(q);
        }
    }
    let body: Vec<String> = pattern.split('*').map(regex::escape).collect();
    let re = regex::Regex::new(&format!("^{}$", body.join("[^?#]*"))).unwrap();
    re.is_match(&url)
}

const SEGMENTS: &[&str] = &["a", "b", "cart", "view.html", "x-y", "A"];
const FILL: &[&str] = &["", "a", "b/c", "cart", "q", "/", "view.html", "a/b/c"];

/// A syntactically valid random pattern.
pub fn random_pattern(rng: &mut StdRng) -> String {
    let host = ["www.shop.example", "shop.example", "Shop.Example:8443"].choose(rng).unwrap();
    let scheme = if rng.gen_bool(0.9) { "https" } else { "HTTP" };
    let n = rng.gen_range(0..4);
    let mut path = String::new();
    for _ in 0..n {
        path.push('/');
        if rng.gen_bool(0.3) {
            path.push('*');
        } else {
            path.push_str(SEGMENTS.choose(rng).unwrap());
        }
    }
    if path.is_empty() || rng.gen_bool(0.3) {
        path.push('/');
    }
    if rng.gen_bool(0.35) && !path.ends_with('*') {
        path.push('*');
    }
    if rng.gen_bool(0.2) {
        if path.ends_with('*') && !path.ends_with("/*") {
            path.pop();
        }
        path.push_str(["?k=v", "?k=*", "?ref=nav&k=*"].choose(rng).unwrap());
    }
    format!("{scheme}://{host}{path}")
}

/// A URL that may or may not be covered by `pattern`.
pub fn random_url_for(rng: &mut StdRng, pattern: &str) -> String {
    let mut url = String::new();
    if rng.gen_bool(0.7) {
        // Instantiate the wildcards.
        for (i, part) in pattern.split('*').enumerate() {
            if i > 0 {
                url.push_str(FILL.choose(rng).unwrap());
            }
            url.push_str(part);
        }
    } else {
        let host = ["www.shop.example", "shop.example", "other.example", "shop.example:8443"].choose(rng).unwrap();
        url = format!("https://{host}");
        for _ in 0..rng.gen_range(0..4) {
            url.push('/');
            url.push_str(SEGMENTS.choose(rng).unwrap());
        }
        if rng.gen_bool(0.2) {
            url.push('/');
        }
    }
    if rng.gen_bool(0.2) {
        url.push_str(["?ref=nav", "?k=v", "?k=v?x", "#frag", "?"].choose(rng).unwrap());
    }
    if rng.gen_bool(0.1) {
        url = url.to_ascii_uppercase().replacen("HTTPS://", "https://", 1);
    }
    url
}

/// Breadth-first search over the product of the two patterns' path
/// automata, where `*` loops on any character other than `?` and `#`. The
/// alphabet is every literal byte of either pattern plus one byte in neither,
/// which stands for all the rest. Returns the shortest common path.
pub fn brute_force_overlap(a: &str, b: &str) -> Option<String> {
    let path = |p: &str| -> Vec<u8> {
        let rest = p.split_once("://").unwrap().1;
        rest[rest.find('/').unwrap()..].as_bytes().to_vec()
    };
    let (pa, pb) = (path(a), path(b));
    let mut alphabet: Vec<u8> = pa.iter().chain(&pb).copied().filter(|c| *c != b'*').collect();
    alphabet.push((b'a'..=b'z').find(|c| !alphabet.contains(c)).unwrap());
    alphabet.sort();
    alphabet.dedup();
    let close = |p: &[u8], mut i: usize| {
        while i < p.len() && p[i] == b'*' {
            i += 1;
        }
        i
    };
    // Epsilon closure keeps only the furthest state after a run of stars;
    // the stars themselves stay reachable because a star state loops.
    let step = |p: &[u8], i: usize, c: u8| -> Vec<usize> {
        let mut out = Vec::new();
        let mut k = i;
        loop {
            if k < p.len() && p[k] == b'*' {
                out.push(k);
                k += 1;
                continue;
            }
            if k < p.len() && p[k] == c {
                out.push(k + 1);
            }
            break;
        }
        out
    };
    let accepts = |p: &[u8], i: usize| close(p, i) == p.len();
    let mut seen = std::collections::HashSet::new();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((0usize, 0usize, Vec::<u8>::new()));
    seen.insert((0, 0));
    while let Some((i, j, word)) = queue.pop_front() {
        if accepts(&pa, i) && accepts(&pb, j) {
            return Some(String::from_utf8(word).unwrap());
        }
        for &c in &alphabet {
            for ni in step(&pa, i, c) {
                for nj in step(&pb, j, c) {
                    if seen.insert((ni, nj)) {
                        let mut w = word.clone();
                        w.push(c);
                        queue.push_back((ni, nj, w));
                    }
                }
            }
        }
    }
    None
}

/// Query-free patterns over the alphabet used by [`brute_force_overlap`].
pub fn small_pattern(rng: &mut StdRng) -> String {
    let mut path = String::new();
    let mut literal = 0;
    for _ in 0..rng.gen_range(1..4) {
        path.push('/');
        if rng.gen_bool(0.35) {
            path.push('*');
        } else {
            let seg = ["a", "b", "ab", "ba"].choose(rng).unwrap();
            literal += seg.len();
            path.push_str(seg);
        }
    }
    if rng.gen_bool(0.3) {
        path.push('/');
    }
    if rng.gen_bool(0.4) && !path.ends_with('*') && literal < 4 {
        path.push('*');
    }
    format!("https://h.example{path}")
}

// ---------------------------------------------------------------- partial order

/// Pairs (i, j) of allow/condition policies whose action bitsets are neither
/// disjoint nor nested.
pub fn brute_force_partial_order(sets: &[(bool, u32)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let ((deny_a, a), (deny_b, b)) = (sets[i], sets[j]);
            if deny_a || deny_b {
                continue;
            }
            let common = a & b;
            if common != 0 && common != a && common != b {
                out.push((i, j));
            }
        }
    }
    out
}

// ---------------------------------------------------------------- conditions

#[derive(Debug, Clone)]
pub enum RExpr {
    Num(i64),
    Str(String),
    Bool(bool),
    Param(String),
    Arg(String),
    Not(Box<RExpr>),
    Neg(Box<RExpr>),
    Bin(&'static str, Box<RExpr>, Box<RExpr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RVal {
    Num(i64),
    Str(String),
    Bool(bool),
    List(Vec<String>),
}

fn prec(op: &str) -> u8 {
    match op {
        "||" => 1,
        "&&" => 2,
        "+" | "-" => 4,
        _ => 3,
    }
}

fn expr_prec(e: &RExpr) -> u8 {
    match e {
        RExpr::Bin(op, _, _) => prec(op),
        RExpr::Not(_) | RExpr::Neg(_) => 5,
        RExpr::Num(n) if *n < 0 => 5,
        _ => 6,
    }
}

fn num_text(h: i64) -> String {
    Amount::from_hundredths(h).to_string()
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl RExpr {
    /// Every compound wrapped in parentheses.
    pub fn full(&self) -> String {
        match self {
            RExpr::Num(n) => num_text(*n),
            RExpr::Str(s) => quote(s),
            RExpr::Bool(b) => b.to_string(),
            RExpr::Param(n) => format!("params.{n}"),
            RExpr::Arg(n) => format!("args.{n}"),
            RExpr::Not(e) => format!("(!{})", e.full()),
            RExpr::Neg(e) => format!("(-{})", e.full()),
            RExpr::Bin(op, l, r) => format!("({} {op} {})", l.full(), r.full()),
        }
    }

    /// Parentheses only where precedence requires them.
    pub fn minimal(&self) -> String {
        let wrap = |e: &RExpr, need: u8| {
            if expr_prec(e) < need {
                format!("({})", e.minimal())
            } else {
                e.minimal()
            }
        };
        match self {
            RExpr::Not(e) => format!("!{}", wrap(e, 5)),
            RExpr::Neg(e) => format!("-{}", wrap(e, 5)),
            RExpr::Bin(op, l, r) => {
                let p = prec(op);
                // Comparisons do not chain, so both sides bind tighter.
                let left_need = if p == 3 { 4 } else { p };
                format!("{} {op} {}", wrap(l, left_need), wrap(r, p + 1))
            }
            other => other.full(),
        }
    }

    pub fn eval(&self, params: &BTreeMap<String, RVal>, args: &BTreeMap<String, RVal>) -> Option<RVal> {
        Some(match self {
            RExpr::Num(n) => RVal::Num(*n),
            RExpr::Str(s) => RVal::Str(s.clone()),
            RExpr::Bool(b) => RVal::Bool(*b),
            RExpr::Param(n) => params.get(n)?.clone(),
            RExpr::Arg(n) => args.get(n)?.clone(),
            RExpr::Not(e) => match e.eval(params, args)? {
                RVal::Bool(b) => RVal::Bool(!b),
                _ => return None,
            },
            RExpr::Neg(e) => match e.eval(params, args)? {
                RVal::Num(n) => RVal::Num(n.checked_neg()?),
                _ => return None,
            },
            RExpr::Bin(op, l, r) => {
                let a = l.eval(params, args)?;
                let b = r.eval(params, args)?;
                match (*op, a, b) {
                    ("||", RVal::Bool(x), RVal::Bool(y)) => RVal::Bool(x || y),
                    ("&&", RVal::Bool(x), RVal::Bool(y)) => RVal::Bool(x && y),
                    ("+", RVal::Num(x), RVal::Num(y)) => RVal::Num(x.checked_add(y)?),
                    ("-", RVal::Num(x), RVal::Num(y)) => RVal::Num(x.checked_sub(y)?),
                    ("in", RVal::Str(x), RVal::List(l)) => RVal::Bool(l.contains(&x)),
                    ("==" | "!=", x, y) => {
                        if std::mem::discriminant(&x) != std::mem::discriminant(&y) {
                            return None;
                        }
                        RVal::Bool((x == y) == (*op == "=="))
                    }
                    (op @ ("<" | "<=" | ">" | ">="), x, y) => {
                        let ord = match (x, y) {
                            (RVal::Num(x), RVal::Num(y)) => x.cmp(&y),
                            (RVal::Str(x), RVal::Str(y)) if ref_is_date(&x) && ref_is_date(&y) => x.cmp(&y),
                            _ => return None,
                        };
                        RVal::Bool(match op {
                            "<" => ord.is_lt(),
                            "<=" => ord.is_le(),
                            ">" => ord.is_gt(),
                            _ => ord.is_ge(),
                        })
                    }
                    _ => return None,
                }
            }
        })
    }
}

/// Calendar check via a days-in-month table.
pub fn ref_is_date(s: &str) -> bool {
    let parts: Vec<&str> = s.split('-').collect();
    if parts.len() != 3 || parts[0].len() != 4 || parts[1].len() != 2 || parts[2].len() != 2 {
        return false;
    }
    if !parts.iter().all(|p| p.chars().all(|c| c.is_ascii_digit())) {
        return false;
    }
    let (y, m, d): (u32, u32, u32) = (parts[0].parse().unwrap(), parts[1].parse().unwrap(), parts[2].parse().unwrap());
    let feb = if y % 400 == 0 || (y % 4 == 0 && y % 100 != 0) { 29 } else { 28 };
    let table = [31, feb, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    (1..=12).contains(&m) && d >= 1 && d <= table[(m - 1) as usize]
}

const NAMES: &[&str] = &["a", "b", "total", "when", "scopes"];
const STRINGS: &[&str] = &["api", "read_user", "2026-05-17", "2026-05-22", "2024-02-29", "2025-02-29", "x\"y", ""];

pub fn random_rexpr(rng: &mut StdRng, depth: u32) -> RExpr {
    if depth == 0 || rng.gen_bool(0.25) {
        return match rng.gen_range(0..5) {
            0 => RExpr::Num(rng.gen_range(-500..5000)),
            1 => RExpr::Str(STRINGS.choose(rng).unwrap().to_string()),
            2 => RExpr::Bool(rng.gen()),
            3 => RExpr::Param(NAMES.choose(rng).unwrap().to_string()),
            _ => RExpr::Arg(NAMES.choose(rng).unwrap().to_string()),
        };
    }
    let sub = |rng: &mut StdRng| Box::new(random_rexpr(rng, depth - 1));
    match rng.gen_range(0..12) {
        0 => RExpr::Not(sub(rng)),
        1 => RExpr::Neg(sub(rng)),
        n => {
            let op = ["||", "&&", "==", "!=", "<", "<=", ">", ">=", "in", "+", "-"][(n as usize - 1) % 11];
            // Bias toward boolean-producing shapes so evaluation often succeeds.
            let op = if rng.gen_bool(0.3) { ["||", "&&"][rng.gen_range(0..2)] } else { op };
            RExpr::Bin(op, sub(rng), sub(rng))
        }
    }
}

pub fn random_rval(rng: &mut StdRng) -> RVal {
    match rng.gen_range(0..4) {
        0 => RVal::Num(rng.gen_range(-500..5000)),
        1 => RVal::Str(STRINGS.choose(rng).unwrap().to_string()),
        2 => RVal::Bool(rng.gen()),
        _ => {
            let n = rng.gen_range(0..3);
            RVal::List(STRINGS.choose_multiple(rng, n).map(|s| s.to_string()).collect())
        }
    }
}

pub fn random_env(rng: &mut StdRng) -> BTreeMap<String, RVal> {
    let mut env = BTreeMap::new();
    for n in NAMES {
        if rng.gen_bool(0.8) {
            env.insert(n.to_string(), random_rval(rng));
        }
    }
    env
}

pub fn to_value_map(env: &BTreeMap<String, RVal>) -> ValueMap {
    env.iter()
        .map(|(k, v)| {
            let v = match v {
                RVal::Num(n) => Value::Number(Amount::from_hundredths(*n)),
                RVal::Str(s) => Value::String(s.clone()),
                RVal::Bool(b) => Value::Bool(*b),
                RVal::List(l) => Value::StringList(l.clone()),
            };
            (k.clone(), v)
        })
        .collect()
}

/// `Some(true|false)` for a boolean result, `None` for any error.
pub fn reference_outcome(e: &RExpr, params: &BTreeMap<String, RVal>, args: &BTreeMap<String, RVal>) -> Option<bool> {
    match e.eval(params, args) {
        Some(RVal::Bool(b)) => Some(b),
        _ => None,
    }
}

// ---------------------------------------------------------------- compiler

pub const DOMAIN: &str = "shop.example";
const HOSTS: &[&str] = &["shop.example", "www.shop.example", "api.shop.example"];
const PATH_SEGS: &[&str] = &["cart", "order", "items", "a", "b", "*"];
const METHODS: &[&str] = &["GET", "POST", "PUT", "PATCH", "DELETE"];

fn random_entry(rng: &mut StdRng, idx: usize) -> Json {
    let host = HOSTS.choose(rng).unwrap();
    let mut path = String::new();
    for _ in 0..rng.gen_range(1..4) {
        path.push('/');
        path.push_str(PATH_SEGS.choose(rng).unwrap());
    }
    if rng.gen_bool(0.3) && !path.ends_with('*') {
        path.push('*');
    }
    let mut e = json!({
        "method": METHODS.choose(rng).unwrap(),
        "url_pattern": format!("https://{host}{path}"),
        "semantic_action": format!("A{idx}"),
        "description": format!("action {idx}"),
    });
    if rng.gen_bool(0.3) {
        e["body"] = if rng.gen_bool(0.7) {
            {
                let v = *["add", "del", "1"].choose(rng).unwrap();
                json!([{"path": "op", "equals": v}])
            }
        } else {
            json!([{"path": "op", "present": rng.gen_bool(0.5)}])
        };
    }
    let mut args = Vec::new();
    if rng.gen_bool(0.3) {
        args.push(json!({"name": "amount", "type": "number", "source": "request_body", "path": "amount"}));
    }
    if rng.gen_bool(0.2) {
        args.push(json!({"name": "q", "type": "string", "source": "request_query", "key": "q"}));
    }
    if rng.gen_bool(0.3) {
        args.push(json!({"name": "total", "type": "number", "source": "dom",
                         "url": "https://shop.example/checkout*", "selector": "#total"}));
    }
    if !args.is_empty() {
        e["args"] = Json::Array(args);
    }
    e
}

/// A random valid sitemap with up to `max_entries` entries. Candidate entries
/// that would overlap an accepted one are dropped.
pub fn random_sitemap(rng: &mut StdRng, max_entries: usize) -> (Json, Sitemap) {
    let mut entries: Vec<Json> = Vec::new();
    let target = rng.gen_range(0..=max_entries);
    let mut idx = 0;
    let mut tries = 0;
    while entries.len() < target && tries < max_entries * 6 {
        tries += 1;
        let cand = random_entry(rng, idx);
        entries.push(cand);
        let doc = json!({"domain": DOMAIN, "version": 1, "sitemap": entries});
        if cellgate_core::parse_sitemap(doc.to_string().as_bytes()).is_err() {
            entries.pop();
        } else {
            idx += 1;
        }
    }
    let doc = json!({"domain": DOMAIN, "version": 1, "sitemap": entries});
    let s = cellgate_core::parse_sitemap(doc.to_string().as_bytes()).unwrap();
    (doc, s)
}

/// A random policy set valid against `sitemap`, with up to `max` policies.
pub fn random_policy_set(rng: &mut StdRng, sitemap: &Sitemap, max: usize) -> PolicySet {
    let actions: Vec<&str> = sitemap.entries.iter().map(|e| e.semantic_action.as_str()).collect();
    let mut policies: Vec<Json> = Vec::new();
    if actions.is_empty() {
        return cellgate_core::parse_policy_set(json!({"domain": DOMAIN, "policies": []}).to_string().as_bytes(), sitemap)
            .unwrap();
    }
    let target = rng.gen_range(0..=max);
    let mut tries = 0;
    while policies.len() < target && tries < max * 8 {
        tries += 1;
        let n = rng.gen_range(1..=actions.len().min(4));
        let chosen: Vec<&str> = actions.choose_multiple(rng, n).copied().collect();
        let name = format!("p{tries}");
        let mut p = json!({"name": name, "actions": chosen, "description": format!("policy {tries}")});
        match rng.gen_range(0..3) {
            0 => p["effect"] = json!("allow"),
            1 => p["effect"] = json!("deny"),
            _ => {
                p["effect"] = json!("condition");
                let governed: Vec<_> = chosen.iter().filter_map(|a| sitemap.entry(a)).collect();
                let has = |arg: &str| governed.iter().any(|e| e.arg(arg).is_some());
                let (src, args) = if has("total") && rng.gen_bool(0.6) {
                    ("args.total <= params.max", vec!["total"])
                } else if has("amount") && rng.gen_bool(0.6) {
                    ("args.amount < params.max", vec!["amount"])
                } else {
                    ("params.max >= 10", vec![])
                };
                p["condition"] = json!({"function": format!("f{tries}"), "function_src": src,
                                        "params": {"max": "number"}, "args": args});
            }
        }
        policies.push(p);
        let doc = json!({"domain": DOMAIN, "policies": policies});
        if cellgate_core::parse_policy_set(doc.to_string().as_bytes(), sitemap).is_err() {
            policies.pop();
        }
    }
    let doc = json!({"domain": DOMAIN, "policies": policies, "allowlist": ["https://cdn.other.example/*"]});
    cellgate_core::parse_policy_set(doc.to_string().as_bytes(), sitemap).unwrap()
}

pub fn random_composite(rng: &mut StdRng, set: &PolicySet) -> CompositePolicy {
    let mut selections = Vec::new();
    for p in &set.policies {
        if !rng.gen_bool(0.5) {
            continue;
        }
        let params = (p.effect == Effect::Condition).then(|| json!({"max": rng.gen_range(0..100)}).as_object().cloned().unwrap());
        selections.push((p.name.clone(), params));
    }
    selections.shuffle(rng);
    let allowlist = if rng.gen_bool(0.5) { set.allowlist.clone() } else { vec![] };
    cellgate_core::assemble_composite(set, &selections, &allowlist).unwrap()
}

pub fn random_probe(rng: &mut StdRng, sitemap: &Sitemap) -> RequestView {
    let method = if !sitemap.entries.is_empty() && rng.gen_bool(0.7) {
        let e = sitemap.entries.choose(rng).unwrap();
        let mut url = String::new();
        for (i, part) in e.matcher.url_pattern.as_str().split('*').enumerate() {
            if i > 0 {
                url.push_str(["x", "", "cart/b", "order"].choose(rng).unwrap());
            }
            url.push_str(part);
        }
        let m = if rng.gen_bool(0.85) { e.matcher.method.as_str() } else { METHODS.choose(rng).unwrap() };
        (m.to_owned(), url)
    } else {
        let host = ["shop.example", "www.shop.example", "cdn.other.example", "evil.example"].choose(rng).unwrap();
        let mut url = format!("https://{host}");
        for _ in 0..rng.gen_range(0..3) {
            url.push('/');
            url.push_str(PATH_SEGS[..5].choose(rng).unwrap());
        }
        (METHODS.choose(rng).unwrap().to_string(), url)
    };
    let (m, mut url) = method;
    if rng.gen_bool(0.2) {
        url.push_str("?q=hello");
    }
    let body: (Option<&str>, Vec<u8>) = match rng.gen_range(0..5) {
        0 => (None, vec![]),
        1 => (Some("application/json"), b"{broken".to_vec()),
        2 => (
            Some("application/x-www-form-urlencoded"),
            format!("op={}&amount={}", ["add", "del", "1"].choose(rng).unwrap(), rng.gen_range(0..100)).into_bytes(),
        ),
        _ => {
            let mut j = json!({"amount": rng.gen_range(0..100)});
            if rng.gen_bool(0.7) {
                j["op"] = [json!("add"), json!("del"), json!(1)].choose(rng).unwrap().clone();
            }
            (Some("application/json"), j.to_string().into_bytes())
        }
    };
    RequestView::new(&m, &url, body.0, &body.1).unwrap()
}

/// What the naive interpreter says about one request.
#[derive(Debug, Clone, PartialEq)]
pub enum NaiveOutcome {
    Allowlisted,
    PassThrough,
    Matched {
        action: String,
        body_unparsed: bool,
        args: ValueMap,
        decision: NaiveDecision,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NaiveDecision {
    Allow,
    Deny(Option<String>),
    Evaluate(Vec<(String, ValueMap)>),
}

/// Rescans the sitemap and every selected policy for each request.
pub fn naive_route(sitemap: &Sitemap, set: &PolicySet, composite: &CompositePolicy, req: &RequestView) -> NaiveOutcome {
    if composite.allowlist.iter().any(|p| p.matches(&req.url)) {
        return NaiveOutcome::Allowlisted;
    }
    let mut found = None;
    for (i, e) in sitemap.entries.iter().enumerate() {
        match e.matcher.check(req) {
            MatchState::Yes => {
                found = Some((i, false));
                break;
            }
            MatchState::BodyUnknown if found.is_none() => found = Some((i, true)),
            _ => {}
        }
    }
    let Some((i, unknown)) = found else {
        return NaiveOutcome::PassThrough;
    };
    let entry = &sitemap.entries[i];
    let mut deny = None;
    let mut conds = Vec::new();
    let mut allow = false;
    for sel in &composite.selected {
        let p = set.get(&sel.name).unwrap();
        if !p.actions.contains(&entry.semantic_action) {
            continue;
        }
        match p.effect {
            Effect::Deny => {
                if deny.is_none() {
                    deny = Some(p.name.clone());
                }
            }
            Effect::Condition => conds.push((p.name.clone(), sel.params.clone().unwrap_or_default())),
            Effect::Allow => allow = true,
        }
    }
    let decision = if deny.is_some() {
        NaiveDecision::Deny(deny)
    } else if !conds.is_empty() {
        NaiveDecision::Evaluate(conds)
    } else if allow {
        NaiveDecision::Allow
    } else {
        NaiveDecision::Deny(None)
    };
    NaiveOutcome::Matched {
        action: entry.semantic_action.clone(),
        body_unparsed: unknown || matches!(req.body, cellgate_core::body::BodyView::Unparseable),
        args: entry.extract_request_args(req).0,
        decision,
    }
}

/// Projects a table lookup onto the naive outcome shape.
pub fn project(route: &Route<'_>) -> NaiveOutcome {
    match route {
        Route::Allowlisted => NaiveOutcome::Allowlisted,
        Route::PassThrough => NaiveOutcome::PassThrough,
        Route::Matched { hit, decision } => NaiveOutcome::Matched {
            action: hit.semantic_action.clone(),
            body_unparsed: hit.body_unparsed,
            args: hit.args.clone(),
            decision: match decision {
                Decision::Allow => NaiveDecision::Allow,
                Decision::Deny(DenyCause::Policy(p)) => NaiveDecision::Deny(Some(p.clone())),
                Decision::Deny(DenyCause::Unselected) => NaiveDecision::Deny(None),
                Decision::Evaluate(c) => {
                    NaiveDecision::Evaluate(c.iter().map(|b| (b.policy.clone(), b.params.clone())).collect())
                }
            },
        },
    }
}

pub struct EquivalenceRun {
    pub instances: usize,
    pub probes: usize,
    pub matched: usize,
    pub evaluate: usize,
    pub mismatches: usize,
    pub examples: Vec<String>,
}

/// Runs `instances` random compile-vs-naive comparisons.
pub fn compiler_equivalence(seed: u64, instances: usize, probes: usize) -> EquivalenceRun {
    use rand::SeedableRng;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut run = EquivalenceRun {
        instances,
        probes: 0,
        matched: 0,
        evaluate: 0,
        mismatches: 0,
        examples: Vec::new(),
    };
    for _ in 0..instances {
        let (_, sitemap) = random_sitemap(&mut rng, 20);
        let set = random_policy_set(&mut rng, &sitemap, 8);
        let composite = random_composite(&mut rng, &set);
        let table = cellgate_core::compile(&sitemap, &set, &composite).unwrap();
        for _ in 0..probes {
            let req = random_probe(&mut rng, &sitemap);
            run.probes += 1;
            let want = naive_route(&sitemap, &set, &composite, &req);
            let got = project(&table.lookup(&req));
            if let NaiveOutcome::Matched { decision, .. } = &want {
                run.matched += 1;
                run.evaluate += matches!(decision, NaiveDecision::Evaluate(_)) as usize;
            }
            if want != got {
                run.mismatches += 1;
                if run.examples.len() < 5 {
                    run.examples.push(format!("{} {}: table {got:?} naive {want:?}", req.method, req.url));
                }
            }
        }
    }
    run
}
