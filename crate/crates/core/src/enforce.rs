//! The per-request decision: table lookup, argument resolution and condition
//! evaluation. Any failure on a matched request resolves to a deny.

use serde_json::{json, Value as Json};

use crate::compiler::{AuthTable, Decision, DenyCause, Route};
use crate::condlang::Verdict;
use crate::context::ContextCache;
use crate::request::RequestView;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteKind {
    Allowlisted,
    PassThrough,
    Matched,
}

impl RouteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteKind::Allowlisted => "allowlisted",
            RouteKind::PassThrough => "pass_through",
            RouteKind::Matched => "matched",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enforcement {
    pub route: RouteKind,
    pub policy_domain: String,
    pub semantic_action: Option<String>,
    pub verdict: Verdict,
    /// Policy responsible for a block, or `unselected`.
    pub blocked_by: Option<String>,
}

impl Enforcement {
    pub fn forward(&self) -> bool {
        self.verdict.is_allow()
    }

    /// Body of the synthesized 403 for a blocked request.
    pub fn block_body(&self) -> Json {
        let reason = match &self.verdict {
            Verdict::DenyByError(r) => r.clone(),
            Verdict::Deny => match self.blocked_by.as_deref() {
                Some("unselected") | None => "no selected policy grants this action".to_owned(),
                Some(p) => format!("denied by policy {p}"),
            },
            Verdict::Allow => String::new(),
        };
        json!({
            "blocked_by": self.blocked_by,
            "policy_domain": self.policy_domain,
            "semantic_action": self.semantic_action,
            "reason": reason,
        })
    }
}

pub fn decide(table: &AuthTable, cache: &ContextCache, req: &RequestView) -> Enforcement {
    let mut out = Enforcement {
        route: RouteKind::PassThrough,
        policy_domain: table.domain.clone(),
        semantic_action: None,
        verdict: Verdict::Allow,
        blocked_by: None,
    };
    let (hit, decision) = match table.lookup(req) {
        Route::Allowlisted => {
            out.route = RouteKind::Allowlisted;
            return out;
        }
        Route::PassThrough => return out,
        Route::Matched { hit, decision } => (hit, decision),
    };
    out.route = RouteKind::Matched;
    out.semantic_action = Some(hit.semantic_action.clone());
    let entry = &table.rules[hit.entry].entry;

    if hit.body_unparsed && entry.needs_body() {
        out.verdict = Verdict::DenyByError("request body could not be parsed".into());
        out.blocked_by = Some(policy_of(decision));
        return out;
    }
    match decision {
        Decision::Allow => {}
        Decision::Deny(cause) => {
            out.verdict = Verdict::Deny;
            out.blocked_by = Some(cause.to_string());
        }
        Decision::Evaluate(conds) => {
            let required = decision.required_args();
            if let Some((arg, err)) = hit.arg_errors.iter().find(|(a, _)| required.contains(a)) {
                out.verdict = Verdict::DenyByError(format!("argument {arg}: {err}"));
                out.blocked_by = Some(conds[0].policy.clone());
                return out;
            }
            let args = match cache.resolve_args(&required, entry, &hit.args) {
                Ok(a) => a,
                Err(e) => {
                    out.verdict = Verdict::DenyByError(e.to_string());
                    out.blocked_by = Some(conds[0].policy.clone());
                    return out;
                }
            };
            for c in conds {
                let v = c.program.evaluate(&c.params, &args);
                if !v.is_allow() {
                    out.verdict = v;
                    out.blocked_by = Some(c.policy.clone());
                    return out;
                }
            }
        }
    }
    if out.verdict.is_allow() && req.method != "GET" {
        cache.mark_pending(&hit.semantic_action);
    }
    out
}

fn policy_of(decision: &Decision) -> String {
    match decision {
        Decision::Evaluate(conds) => conds[0].policy.clone(),
        Decision::Deny(cause) => cause.to_string(),
        Decision::Allow => DenyCause::Unselected.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::compile;
    use crate::context::{ArgCatalog, LockoutConfig, ManualClock};
    use crate::policy::{parse_composite, parse_policy_set};
    use crate::sitemap::parse_sitemap;
    use crate::value::ValueType;
    use std::sync::Arc;

    fn setup(lockout: bool) -> (AuthTable, ContextCache) {
        let sitemap = parse_sitemap(
            json!({"domain": "gitlab.com", "version": 1, "sitemap": [
                {"method": "POST", "url_pattern": "https://gitlab.com/-/user_settings/personal_access_tokens",
                 "semantic_action": "CreateAccessToken", "description": "Create a personal access token",
                 "args": [{"name": "scopes", "type": "string_list", "source": "request_body",
                           "path": "personal_access_token.scopes"}]},
                {"method": "POST", "url_pattern": "https://gitlab.com/*/*/-/issues/*/notes",
                 "semantic_action": "CommentIssue", "description": "Comment on an issue"},
                {"method": "POST", "url_pattern": "https://gitlab.com/cart/checkout",
                 "semantic_action": "Buy", "description": "Buy",
                 "args": [{"name": "total", "type": "number", "source": "dom",
                           "url": "https://gitlab.com/cart*", "selector": "#t"}]}
            ]})
            .to_string()
            .as_bytes(),
        )
        .unwrap();
        let set = parse_policy_set(
            json!({"domain": "gitlab.com", "policies": [
                {"name": "comment_issue", "effect": "allow", "actions": ["CommentIssue"], "description": "Comment"},
                {"name": "read_only_tokens", "effect": "condition", "actions": ["CreateAccessToken"], "description": "Tokens without api scope",
                 "condition": {"function": "noApi", "function_src": "!(\"api\" in args.scopes)", "args": ["scopes"]}},
                {"name": "buy_leq", "effect": "condition", "actions": ["Buy"], "description": "Cap",
                 "condition": {"function": "cap", "function_src": "args.total <= params.max",
                               "params": {"max": "number"}, "args": ["total"]}}
            ]})
            .to_string()
            .as_bytes(),
            &sitemap,
        )
        .unwrap();
        let composite = parse_composite(
            json!({"domain": "gitlab.com", "policies": [
                {"name": "comment_issue"}, {"name": "read_only_tokens"}, {"name": "buy_leq", "params": {"max": 50}}
            ]})
            .to_string()
            .as_bytes(),
            &set,
        )
        .unwrap();
        let table = compile(&sitemap, &set, &composite).unwrap();
        let cache = ContextCache::new(
            ArgCatalog::from_sitemaps([&sitemap]),
            LockoutConfig {
                enabled: lockout,
                ..Default::default()
            },
            Arc::new(ManualClock::default()),
        );
        (table, cache)
    }

    const TOKEN_URL: &str = "https://gitlab.com/-/user_settings/personal_access_tokens";

    #[test]
    fn token_scope_condition() {
        let (t, c) = setup(false);
        let api = RequestView::new(
            "POST",
            TOKEN_URL,
            Some("application/x-www-form-urlencoded"),
            b"personal_access_token[name]=x&personal_access_token[scopes][]=api",
        )
        .unwrap();
        let e = decide(&t, &c, &api);
        assert_eq!(e.verdict, Verdict::Deny);
        assert_eq!(e.blocked_by.as_deref(), Some("read_only_tokens"));
        let read = RequestView::with_json(
            "POST",
            TOKEN_URL,
            &json!({"personal_access_token": {"scopes": ["read_user"]}}),
        )
        .unwrap();
        assert!(decide(&t, &c, &read).forward());
    }

    #[test]
    fn fail_closed_paths() {
        let (t, c) = setup(false);
        let garbage = RequestView::new("POST", TOKEN_URL, Some("application/json"), b"{oops").unwrap();
        assert!(matches!(decide(&t, &c, &garbage).verdict, Verdict::DenyByError(_)));
        let none = RequestView::with_json("POST", TOKEN_URL, &json!({})).unwrap();
        assert!(matches!(decide(&t, &c, &none).verdict, Verdict::DenyByError(_)));
        let buy = RequestView::new("POST", "https://gitlab.com/cart/checkout", None, b"").unwrap();
        let e = decide(&t, &c, &buy);
        assert!(matches!(e.verdict, Verdict::DenyByError(ref r) if r.contains("total")), "{e:?}");
        c.ingest("total", &json!("ten"), ValueType::Number, "https://gitlab.com/cart", 1)
            .unwrap_err();
        c.ingest("total", &json!(60), ValueType::Number, "https://gitlab.com/cart", 1).unwrap();
        assert_eq!(decide(&t, &c, &buy).verdict, Verdict::Deny);
        c.ingest("total", &json!(40), ValueType::Number, "https://gitlab.com/cart", 2).unwrap();
        assert!(decide(&t, &c, &buy).forward());
    }

    #[test]
    fn lockout_blocks_stale_reads() {
        let (t, c) = setup(true);
        c.ingest("total", &json!(40), ValueType::Number, "https://gitlab.com/cart", 1).unwrap();
        let comment = RequestView::new("POST", "https://gitlab.com/a/b/-/issues/1/notes", None, b"").unwrap();
        assert!(decide(&t, &c, &comment).forward());
        let buy = RequestView::new("POST", "https://gitlab.com/cart/checkout", None, b"").unwrap();
        assert!(matches!(decide(&t, &c, &buy).verdict, Verdict::DenyByError(_)));
        c.ingest("total", &json!(45), ValueType::Number, "https://gitlab.com/cart", 2).unwrap();
        assert!(decide(&t, &c, &buy).forward());
    }

    #[test]
    fn passthrough_and_block_body() {
        let (t, c) = setup(false);
        let e = decide(&t, &c, &RequestView::get("https://gitlab.com/explore").unwrap());
        assert_eq!(e.route, RouteKind::PassThrough);
        assert!(e.forward());
        let del = RequestView::new("POST", "https://gitlab.com/cart/checkout", None, b"").unwrap();
        let body = decide(&t, &c, &del).block_body();
        assert_eq!(body["policy_domain"], "gitlab.com");
        assert_eq!(body["semantic_action"], "Buy");
    }
}
