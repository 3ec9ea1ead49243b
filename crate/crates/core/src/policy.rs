//! Developer-authored policies, the per-domain policy set, and the composite
//! policy instantiated for one task.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::condlang::{ConditionError, ConditionProgram, Namespace};
use crate::pattern::UrlPattern;
use crate::sitemap::{host_in_domain, is_domain_name, is_identifier, Sitemap};
use crate::value::{Value, ValueMap, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Allow,
    Deny,
    Condition,
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Effect::Allow => "allow",
            Effect::Deny => "deny",
            Effect::Condition => "condition",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCondition {
    pub program: ConditionProgram,
    pub params: BTreeMap<String, ValueType>,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub name: String,
    pub effect: Effect,
    pub actions: Vec<String>,
    pub description: String,
    pub condition: Option<PolicyCondition>,
}

impl Policy {
    pub fn action_set(&self) -> BTreeSet<&str> {
        self.actions.iter().map(String::as_str).collect()
    }

    pub fn governs(&self, action: &str) -> bool {
        self.actions.iter().any(|a| a == action)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub domain: String,
    pub policies: Vec<Policy>,
    /// Developer-specified external patterns carried into every composite.
    pub allowlist: Vec<UrlPattern>,
}

impl PolicySet {
    pub fn get(&self, name: &str) -> Option<&Policy> {
        self.policies.iter().find(|p| p.name == name)
    }
}

/// Two comparable-effect policies whose action sets neither nest nor separate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialOrderViolation {
    pub first: String,
    pub second: String,
    pub shared: String,
    pub only_first: String,
    pub only_second: String,
}

impl fmt::Display for PartialOrderViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "policies `{}` and `{}` overlap on `{}` but `{}` is only in the first and `{}` only in the second",
            self.first, self.second, self.shared, self.only_first, self.only_second
        )
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy schema error: {0}")]
    Schema(String),
    #[error("policy `{policy}` references unknown action `{action}`")]
    UnknownAction { policy: String, action: String },
    #[error("policy `{policy}` uses arg `{arg}` that no governed action declares")]
    UnknownArg { policy: String, arg: String },
    #[error("condition of `{policy}`: {error}")]
    Condition { policy: String, error: ConditionError },
    #[error("partial order violation: {0}")]
    PartialOrder(PartialOrderViolation),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("policy `{policy}` param `{param}`: {reason}")]
    ParamType {
        policy: String,
        param: String,
        reason: String,
    },
    #[error("condition policy `{policy}` is missing params {missing:?}")]
    MissingParams { policy: String, missing: Vec<String> },
    #[error("policy `{0}` takes no params")]
    UnexpectedParams(String),
    #[error("policy `{0}` selected more than once")]
    DuplicateSelection(String),
    #[error("allowlist pattern `{pattern}` is inside domain `{domain}`")]
    AllowlistInsideDomain { pattern: String, domain: String },
    #[error("domain mismatch: expected `{expected}`, found `{found}`")]
    DomainMismatch { expected: String, found: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionDoc {
    function: String,
    function_src: String,
    #[serde(default)]
    params: BTreeMap<String, ValueType>,
    #[serde(default)]
    args: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    name: String,
    effect: Effect,
    actions: Vec<String>,
    description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<ConditionDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySetDoc {
    domain: String,
    policies: Vec<PolicyDoc>,
    #[serde(default)]
    allowlist: Vec<String>,
}

impl From<&PolicySet> for PolicySetDoc {
    fn from(s: &PolicySet) -> Self {
        PolicySetDoc {
            domain: s.domain.clone(),
            policies: s
                .policies
                .iter()
                .map(|p| PolicyDoc {
                    name: p.name.clone(),
                    effect: p.effect,
                    actions: p.actions.clone(),
                    description: p.description.clone(),
                    condition: p.condition.as_ref().map(|c| ConditionDoc {
                        function: c.program.name.clone(),
                        function_src: c.program.source.clone(),
                        params: c.params.clone(),
                        args: c.args.clone(),
                    }),
                })
                .collect(),
            allowlist: s.allowlist.iter().map(|p| p.as_str().to_owned()).collect(),
        }
    }
}

impl Serialize for PolicySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PolicySetDoc::from(self).serialize(s)
    }
}

fn parse_allowlist(raw: &[String], domain: &str) -> Result<Vec<UrlPattern>, PolicyError> {
    raw.iter()
        .map(|r| {
            let p = UrlPattern::parse(r).map_err(|e| PolicyError::Schema(e.to_string()))?;
            if host_in_domain(p.hostname(), domain) {
                return Err(PolicyError::AllowlistInsideDomain {
                    pattern: r.clone(),
                    domain: domain.to_owned(),
                });
            }
            Ok(p)
        })
        .collect()
}

fn build_policy(doc: PolicyDoc, sitemap: &Sitemap) -> Result<Policy, PolicyError> {
    let schema = |m: String| PolicyError::Schema(m);
    if !is_identifier(&doc.name) {
        return Err(schema(format!("invalid policy name `{}`", doc.name)));
    }
    if doc.actions.is_empty() {
        return Err(schema(format!("policy `{}` has no actions", doc.name)));
    }
    if doc.description.trim().is_empty() {
        return Err(schema(format!("policy `{}` has an empty description", doc.name)));
    }
    let mut seen = HashSet::new();
    for a in &doc.actions {
        if !seen.insert(a) {
            return Err(schema(format!("policy `{}` lists `{a}` twice", doc.name)));
        }
        if !sitemap.has_action(a) {
            return Err(PolicyError::UnknownAction {
                policy: doc.name.clone(),
                action: a.clone(),
            });
        }
    }
    let condition = match (doc.effect, doc.condition) {
        (Effect::Condition, None) => {
            return Err(schema(format!("condition policy `{}` has no condition", doc.name)));
        }
        (Effect::Allow | Effect::Deny, Some(_)) => {
            return Err(schema(format!(
                "{} policy `{}` must not carry a condition",
                doc.effect, doc.name
            )));
        }
        (_, None) => None,
        (Effect::Condition, Some(c)) => Some(build_condition(&doc.name, &doc.actions, c, sitemap)?),
    };
    Ok(Policy {
        name: doc.name,
        effect: doc.effect,
        actions: doc.actions,
        description: doc.description,
        condition,
    })
}

fn build_condition(
    policy: &str,
    actions: &[String],
    c: ConditionDoc,
    sitemap: &Sitemap,
) -> Result<PolicyCondition, PolicyError> {
    let schema = |m: String| PolicyError::Schema(m);
    if !is_identifier(&c.function) {
        return Err(schema(format!("invalid function name `{}` in `{policy}`", c.function)));
    }
    let program = ConditionProgram::parse(&c.function, &c.function_src).map_err(|error| PolicyError::Condition {
        policy: policy.to_owned(),
        error,
    })?;
    let mut seen = HashSet::new();
    for arg in &c.args {
        if !seen.insert(arg) {
            return Err(schema(format!("policy `{policy}` lists arg `{arg}` twice")));
        }
        let declared = actions
            .iter()
            .filter_map(|a| sitemap.entry(a))
            .any(|e| e.arg(arg).is_some());
        if !declared {
            return Err(PolicyError::UnknownArg {
                policy: policy.to_owned(),
                arg: arg.clone(),
            });
        }
    }
    for p in c.params.keys() {
        if !is_identifier(p) {
            return Err(schema(format!("invalid param name `{p}` in `{policy}`")));
        }
    }
    for name in program.references(Namespace::Params) {
        if !c.params.contains_key(&name) {
            return Err(schema(format!("condition of `{policy}` reads undeclared params.{name}")));
        }
    }
    for name in program.references(Namespace::Args) {
        if !c.args.contains(&name) {
            return Err(schema(format!("condition of `{policy}` reads undeclared args.{name}")));
        }
    }
    Ok(PolicyCondition {
        program,
        params: c.params,
        args: c.args,
    })
}

/// Parses and validates a policy set against the domain's sitemap.
pub fn parse_policy_set(bytes: &[u8], sitemap: &Sitemap) -> Result<PolicySet, PolicyError> {
    let doc: PolicySetDoc = serde_json::from_slice(bytes).map_err(|e| PolicyError::Schema(e.to_string()))?;
    if !is_domain_name(&doc.domain) {
        return Err(PolicyError::Schema(format!("invalid domain `{}`", doc.domain)));
    }
    if doc.domain != sitemap.domain {
        return Err(PolicyError::DomainMismatch {
            expected: sitemap.domain.clone(),
            found: doc.domain,
        });
    }
    let allowlist = parse_allowlist(&doc.allowlist, &doc.domain)?;
    let mut names = HashSet::new();
    let mut policies = Vec::with_capacity(doc.policies.len());
    for p in doc.policies {
        if !names.insert(p.name.clone()) {
            return Err(PolicyError::Schema(format!("duplicate policy name `{}`", p.name)));
        }
        policies.push(build_policy(p, sitemap)?);
    }
    if let Some(v) = validate_partial_order(&policies).into_iter().next() {
        return Err(PolicyError::PartialOrder(v));
    }
    Ok(PolicySet {
        domain: doc.domain,
        policies,
        allowlist,
    })
}

/// Every pair of allow/condition policies whose action sets are neither
/// disjoint nor nested. Deny policies are not considered.
pub fn validate_partial_order(policies: &[Policy]) -> Vec<PartialOrderViolation> {
    let granting: Vec<(&Policy, BTreeSet<&str>)> = policies
        .iter()
        .filter(|p| p.effect != Effect::Deny)
        .map(|p| (p, p.action_set()))
        .collect();
    let mut out = Vec::new();
    for (i, (p, a)) in granting.iter().enumerate() {
        for (q, b) in &granting[i + 1..] {
            let Some(shared) = a.intersection(b).next() else {
                continue;
            };
            let only_a = a.difference(b).next();
            let only_b = b.difference(a).next();
            if let (Some(x), Some(y)) = (only_a, only_b) {
                out.push(PartialOrderViolation {
                    first: p.name.clone(),
                    second: q.name.clone(),
                    shared: shared.to_string(),
                    only_first: x.to_string(),
                    only_second: y.to_string(),
                });
            }
        }
    }
    out
}

/// One selected policy and, for condition policies, its bound params.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub name: String,
    pub params: Option<ValueMap>,
}

impl Selection {
    pub fn plain(name: &str) -> Selection {
        Selection {
            name: name.to_owned(),
            params: None,
        }
    }

    pub fn with_params(name: &str, params: ValueMap) -> Selection {
        Selection {
            name: name.to_owned(),
            params: Some(params),
        }
    }
}

/// The session-bound set of instantiated policies for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositePolicy {
    pub domain: String,
    pub selected: Vec<Selection>,
    pub allowlist: Vec<UrlPattern>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<serde_json::Map<String, Json>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompositeDoc {
    domain: String,
    policies: Vec<SelectionDoc>,
    #[serde(default)]
    allowlist: Vec<String>,
}

impl CompositePolicy {
    pub fn to_json(&self) -> Json {
        let doc = CompositeDoc {
            domain: self.domain.clone(),
            policies: self
                .selected
                .iter()
                .map(|s| SelectionDoc {
                    name: s.name.clone(),
                    params: s.params.as_ref().map(crate::value::value_map_to_json),
                })
                .collect(),
            allowlist: self.allowlist.iter().map(|p| p.as_str().to_owned()).collect(),
        };
        serde_json::to_value(doc).expect("composite serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("composite serializes")
    }

    /// An empty composite carrying the set's developer allowlist.
    pub fn empty(set: &PolicySet) -> CompositePolicy {
        CompositePolicy {
            domain: set.domain.clone(),
            selected: Vec::new(),
            allowlist: set.allowlist.clone(),
        }
    }
}

impl Serialize for CompositePolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

fn bind_params(policy: &Policy, raw: Option<&serde_json::Map<String, Json>>) -> Result<Option<ValueMap>, PolicyError> {
    let Some(cond) = &policy.condition else {
        return match raw {
            None => Ok(None),
            Some(_) => Err(PolicyError::UnexpectedParams(policy.name.clone())),
        };
    };
    let empty = serde_json::Map::new();
    let raw = match raw {
        Some(r) => r,
        None if cond.params.is_empty() => &empty,
        None => {
            return Err(PolicyError::MissingParams {
                policy: policy.name.clone(),
                missing: cond.params.keys().cloned().collect(),
            })
        }
    };
    if let Some(extra) = raw.keys().find(|k| !cond.params.contains_key(*k)) {
        return Err(PolicyError::ParamType {
            policy: policy.name.clone(),
            param: extra.clone(),
            reason: "not declared by the policy".into(),
        });
    }
    let missing: Vec<String> = cond.params.keys().filter(|k| !raw.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(PolicyError::MissingParams {
            policy: policy.name.clone(),
            missing,
        });
    }
    let mut out = ValueMap::new();
    for (name, ty) in &cond.params {
        let v = Value::from_json_strict(&raw[name], *ty).map_err(|e| PolicyError::ParamType {
            policy: policy.name.clone(),
            param: name.clone(),
            reason: e.to_string(),
        })?;
        out.insert(name.clone(), v);
    }
    Ok(Some(out))
}

/// Builds a composite from selections, type-checking params against the set.
pub fn assemble_composite(
    set: &PolicySet,
    selections: &[(String, Option<serde_json::Map<String, Json>>)],
    allowlist: &[UrlPattern],
) -> Result<CompositePolicy, PolicyError> {
    let mut seen = HashSet::new();
    let mut selected = Vec::with_capacity(selections.len());
    for (name, raw) in selections {
        let policy = set.get(name).ok_or_else(|| PolicyError::UnknownPolicy(name.clone()))?;
        if !seen.insert(name.as_str()) {
            return Err(PolicyError::DuplicateSelection(name.clone()));
        }
        selected.push(Selection {
            name: name.clone(),
            params: bind_params(policy, raw.as_ref())?,
        });
    }
    for p in allowlist {
        if host_in_domain(p.hostname(), &set.domain) {
            return Err(PolicyError::AllowlistInsideDomain {
                pattern: p.as_str().to_owned(),
                domain: set.domain.clone(),
            });
        }
    }
    Ok(CompositePolicy {
        domain: set.domain.clone(),
        selected,
        allowlist: allowlist.to_vec(),
    })
}

/// Parses a composite document and validates it against the policy set.
pub fn parse_composite(bytes: &[u8], set: &PolicySet) -> Result<CompositePolicy, PolicyError> {
    let doc: CompositeDoc = serde_json::from_slice(bytes).map_err(|e| PolicyError::Schema(e.to_string()))?;
    if doc.domain != set.domain {
        return Err(PolicyError::DomainMismatch {
            expected: set.domain.clone(),
            found: doc.domain,
        });
    }
    let allowlist = parse_allowlist(&doc.allowlist, &set.domain)?;
    let selections: Vec<_> = doc.policies.into_iter().map(|s| (s.name, s.params)).collect();
    assemble_composite(set, &selections, &allowlist)
}
