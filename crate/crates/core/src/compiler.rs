//! Lowers a composite policy and its sitemap into the per-domain
//! authorization table consulted on every intercepted request.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde_json::{json, Value as Json};

use crate::condlang::ConditionProgram;
use crate::pattern::UrlPattern;
use crate::policy::{CompositePolicy, Effect, PolicyError, PolicySet};
use crate::request::RequestView;
use crate::sitemap::{MatchState, Method, SemanticHit, Sitemap, SitemapEntry};
use crate::value::{value_map_to_json, ValueMap};

/// A condition policy instantiated with its params.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCondition {
    pub policy: String,
    pub program: Arc<ConditionProgram>,
    pub params: ValueMap,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenyCause {
    /// A selected deny policy covers the action.
    Policy(String),
    /// No selected policy covers the action.
    Unselected,
}

impl fmt::Display for DenyCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyCause::Policy(p) => f.write_str(p),
            DenyCause::Unselected => f.write_str("unselected"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Allow,
    Deny(DenyCause),
    /// Every listed condition must allow.
    Evaluate(Vec<BoundCondition>),
}

impl Decision {
    /// Arg names that must be resolved before evaluation.
    pub fn required_args(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        if let Decision::Evaluate(conds) = self {
            for a in conds.iter().flat_map(|c| c.args.iter()) {
                if !out.contains(a) {
                    out.push(a.clone());
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Json {
        match self {
            Decision::Allow => json!({"effect": "allow"}),
            Decision::Deny(cause) => json!({"effect": "deny", "cause": cause.to_string()}),
            Decision::Evaluate(conds) => json!({
                "effect": "evaluate",
                "conditions": conds.iter().map(|c| json!({
                    "policy": c.policy,
                    "function": c.program.name,
                    "params": value_map_to_json(&c.params),
                    "args": c.args,
                })).collect::<Vec<_>>(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub entry: SitemapEntry,
    pub decision: Decision,
}

#[derive(Debug, Default, Clone)]
struct Bucket {
    by_segment: HashMap<String, Vec<usize>>,
    wildcard: Vec<usize>,
}

/// Where a request lands in the table.
#[derive(Debug, Clone, PartialEq)]
pub enum Route<'a> {
    Allowlisted,
    PassThrough,
    Matched { hit: SemanticHit, decision: &'a Decision },
}

impl Route<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Route::Allowlisted => "allowlisted",
            Route::PassThrough => "pass_through",
            Route::Matched { .. } => "matched",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuthTable {
    pub domain: String,
    pub version: u64,
    pub rules: Vec<Rule>,
    pub allowlist: Vec<UrlPattern>,
    index: HashMap<(Method, String), Bucket>,
    allow_index: HashMap<String, Vec<usize>>,
}

fn resolve(set: &PolicySet, composite: &CompositePolicy, action: &str) -> Result<Decision, PolicyError> {
    let mut conditions = Vec::new();
    let mut allowed = false;
    for sel in &composite.selected {
        let policy = set
            .get(&sel.name)
            .ok_or_else(|| PolicyError::UnknownPolicy(sel.name.clone()))?;
        if !policy.governs(action) {
            continue;
        }
        match policy.effect {
            Effect::Deny => return Ok(Decision::Deny(DenyCause::Policy(policy.name.clone()))),
            Effect::Allow => allowed = true,
            Effect::Condition => {
                let cond = policy.condition.as_ref().expect("condition policies carry a condition");
                conditions.push(BoundCondition {
                    policy: policy.name.clone(),
                    program: Arc::new(cond.program.clone()),
                    params: sel.params.clone().unwrap_or_default(),
                    args: cond.args.clone(),
                });
            }
        }
    }
    Ok(if !conditions.is_empty() {
        Decision::Evaluate(conditions)
    } else if allowed {
        Decision::Allow
    } else {
        Decision::Deny(DenyCause::Unselected)
    })
}

/// Builds the table. Precedence per action is deny, then condition, then allow;
/// actions no selected policy covers are denied.
pub fn compile(sitemap: &Sitemap, set: &PolicySet, composite: &CompositePolicy) -> Result<AuthTable, PolicyError> {
    for (expected, found) in [(&sitemap.domain, &set.domain), (&sitemap.domain, &composite.domain)] {
        if expected != found {
            return Err(PolicyError::DomainMismatch {
                expected: expected.clone(),
                found: found.clone(),
            });
        }
    }
    let mut rules = Vec::with_capacity(sitemap.entries.len());
    let mut index: HashMap<(Method, String), Bucket> = HashMap::new();
    for (i, entry) in sitemap.entries.iter().enumerate() {
        rules.push(Rule {
            entry: entry.clone(),
            decision: resolve(set, composite, &entry.semantic_action)?,
        });
        let pat = &entry.matcher.url_pattern;
        let bucket = index.entry((entry.matcher.method, pat.host().to_owned())).or_default();
        match pat.literal_first_segment() {
            Some(seg) => bucket.by_segment.entry(seg.to_owned()).or_default().push(i),
            None => bucket.wildcard.push(i),
        }
    }
    let mut allow_index: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, p) in composite.allowlist.iter().enumerate() {
        allow_index.entry(p.host().to_owned()).or_default().push(i);
    }
    Ok(AuthTable {
        domain: sitemap.domain.clone(),
        version: sitemap.version,
        rules,
        allowlist: composite.allowlist.clone(),
        index,
        allow_index,
    })
}

impl AuthTable {
    pub fn is_allowlisted(&self, req: &RequestView) -> bool {
        self.allow_index
            .get(&req.url.host)
            .is_some_and(|ids| ids.iter().any(|&i| self.allowlist[i].matches(&req.url)))
    }

    pub fn lookup(&self, req: &RequestView) -> Route<'_> {
        if self.is_allowlisted(req) {
            return Route::Allowlisted;
        }
        let Ok(method) = req.method.parse::<Method>() else {
            return Route::PassThrough;
        };
        let Some(bucket) = self.index.get(&(method, req.url.host.clone())) else {
            return Route::PassThrough;
        };
        let seg = bucket.by_segment.get(req.url.first_segment()).map(Vec::as_slice).unwrap_or(&[]);
        let (mut a, mut b) = (seg.iter().peekable(), bucket.wildcard.iter().peekable());
        let mut unknown = None;
        // Merge both candidate lists in entry order so ties resolve like a full scan.
        loop {
            let i = match (a.peek(), b.peek()) {
                (Some(&&x), Some(&&y)) if x < y => *a.next().unwrap(),
                (Some(_), Some(_)) => *b.next().unwrap(),
                (Some(_), None) => *a.next().unwrap(),
                (None, Some(_)) => *b.next().unwrap(),
                (None, None) => break,
            };
            match self.rules[i].entry.matcher.check(req) {
                MatchState::Yes => return self.matched(i, req, false),
                MatchState::BodyUnknown if unknown.is_none() => unknown = Some(i),
                _ => {}
            }
        }
        match unknown {
            Some(i) => self.matched(i, req, true),
            None => Route::PassThrough,
        }
    }

    fn matched(&self, i: usize, req: &RequestView, body_unknown: bool) -> Route<'_> {
        let rule = &self.rules[i];
        let (args, arg_errors) = rule.entry.extract_request_args(req);
        Route::Matched {
            hit: SemanticHit {
                entry: i,
                semantic_action: rule.entry.semantic_action.clone(),
                args,
                arg_errors,
                body_unparsed: body_unknown || matches!(req.body, crate::body::BodyView::Unparseable),
            },
            decision: &rule.decision,
        }
    }

    pub fn decision_for(&self, action: &str) -> Option<&Decision> {
        self.rules
            .iter()
            .find(|r| r.entry.semantic_action == action)
            .map(|r| &r.decision)
    }

    /// The table as JSON, for inspection and golden files.
    pub fn dump(&self) -> Json {
        json!({
            "domain": self.domain,
            "version": self.version,
            "rules": self.rules.iter().map(|r| {
                let mut rule = json!({
                    "method": r.entry.matcher.method.as_str(),
                    "url_pattern": r.entry.matcher.url_pattern.as_str(),
                    "semantic_action": r.entry.semantic_action,
                    "decision": r.decision.to_json(),
                });
                if !r.entry.matcher.body.is_empty() {
                    rule["body"] = serde_json::to_value(&r.entry.matcher.body).expect("matchers serialize");
                }
                rule
            }).collect::<Vec<_>>(),
            "allowlist": self.allowlist.iter().map(UrlPattern::as_str).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{parse_composite, parse_policy_set};
    use crate::sitemap::parse_sitemap;

    fn fixture() -> (Sitemap, PolicySet, CompositePolicy) {
        let sitemap = parse_sitemap(
            json!({"domain": "amazon.com", "version": 3, "sitemap": [
                {"method": "GET", "url_pattern": "https://www.amazon.com/gp/cart/view.html*",
                 "semantic_action": "ViewCart", "description": "View cart"},
                {"method": "POST", "url_pattern": "https://www.amazon.com/checkout/submit*",
                 "semantic_action": "PlaceOrder", "description": "Place order",
                 "args": [{"name": "totalAmount", "type": "number", "source": "dom",
                           "url": "https://www.amazon.com/checkout/*", "selector": ".grand-total"}]},
                {"method": "POST", "url_pattern": "https://www.amazon.com/address/change*",
                 "semantic_action": "ChangeDeliveryAddress", "description": "Change address"}
            ]})
            .to_string()
            .as_bytes(),
        )
        .unwrap();
        let set = parse_policy_set(
            json!({"domain": "amazon.com", "policies": [
                {"name": "view_shopping_cart", "effect": "allow", "actions": ["ViewCart"], "description": "View cart"},
                {"name": "purchase_amount_leq", "effect": "condition", "actions": ["PlaceOrder"], "description": "Cap",
                 "condition": {"function": "allowPurchaseIfAmountLeq", "function_src": "args.totalAmount <= params.maxAmount",
                               "params": {"maxAmount": "number"}, "args": ["totalAmount"]}}
            ], "allowlist": ["https://m.media-amazon.com/*"]})
            .to_string()
            .as_bytes(),
            &sitemap,
        )
        .unwrap();
        let composite = parse_composite(
            json!({"domain": "amazon.com", "policies": [
                {"name": "view_shopping_cart"},
                {"name": "purchase_amount_leq", "params": {"maxAmount": 50}}
            ], "allowlist": ["https://m.media-amazon.com/*"]})
            .to_string()
            .as_bytes(),
            &set,
        )
        .unwrap();
        (sitemap, set, composite)
    }

    #[test]
    fn amazon_table() {
        let (s, set, c) = fixture();
        let t = compile(&s, &set, &c).unwrap();
        assert_eq!(t.rules.len(), 3);
        assert_eq!(t.decision_for("ViewCart"), Some(&Decision::Allow));
        assert_eq!(
            t.decision_for("ChangeDeliveryAddress"),
            Some(&Decision::Deny(DenyCause::Unselected))
        );
        let Some(Decision::Evaluate(conds)) = t.decision_for("PlaceOrder") else {
            panic!()
        };
        assert_eq!(conds[0].program.name, "allowPurchaseIfAmountLeq");
        assert_eq!(t.decision_for("PlaceOrder").unwrap().required_args(), vec!["totalAmount"]);

        let cdn = RequestView::get("https://m.media-amazon.com/images/x.png").unwrap();
        assert_eq!(t.lookup(&cdn), Route::Allowlisted);
        let other = RequestView::get("https://www.amazon.com/some/unmapped/page").unwrap();
        assert_eq!(t.lookup(&other), Route::PassThrough);
        let order = RequestView::new("POST", "https://www.amazon.com/checkout/submit", None, b"").unwrap();
        match t.lookup(&order) {
            Route::Matched { hit, decision } => {
                assert_eq!(hit.semantic_action, "PlaceOrder");
                assert!(matches!(decision, Decision::Evaluate(_)));
            }
            r => panic!("{r:?}"),
        }
        let cart = RequestView::get("https://www.amazon.com/gp/cart/view.html?ref=nav").unwrap();
        assert!(matches!(t.lookup(&cart), Route::Matched { decision: Decision::Allow, .. }));
    }

    #[test]
    fn empty_composite_denies_everything_mapped() {
        let (s, set, _) = fixture();
        let t = compile(&s, &set, &CompositePolicy::empty(&set)).unwrap();
        assert!(t.rules.iter().all(|r| r.decision == Decision::Deny(DenyCause::Unselected)));
        let other = RequestView::get("https://www.amazon.com/s?k=coffee").unwrap();
        assert_eq!(t.lookup(&other), Route::PassThrough);
    }

    #[test]
    fn dump_shape() {
        let (s, set, c) = fixture();
        let d = compile(&s, &set, &c).unwrap().dump();
        assert_eq!(d["rules"][1]["decision"]["conditions"][0]["params"]["maxAmount"], json!(50));
        assert_eq!(d["rules"][0]["decision"]["effect"], "allow");
        assert_eq!(d["allowlist"][0], "https://m.media-amazon.com/*");
    }
}
