//! Two-stage selection: predict the domains a task needs, then pick the
//! least-privileged policies (with parameters) per domain.

use std::collections::BTreeSet;

use cellgate_core::{assemble_composite, CompositePolicy, Effect, PolicyError, PolicySet};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::bundle::{fetch_bundle, Bundle, BundleSource};
use crate::prompts::{correction, domain_messages, policy_messages, PolicyCard};
use crate::provider::{ChatMessage, Provider, ProviderError, ProviderRequest, Stage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: Option<String>,
    pub text: String,
}

impl TaskSpec {
    pub fn new(text: impl Into<String>) -> TaskSpec {
        TaskSpec {
            id: None,
            text: text.into(),
        }
    }

    pub fn with_id(id: impl Into<String>, text: impl Into<String>) -> TaskSpec {
        TaskSpec {
            id: Some(id.into()),
            text: text.into(),
        }
    }
}

pub type RawSelection = (String, Option<Map<String, Json>>);

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("task text is empty")]
    EmptyTask,
    #[error("task rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{stage} answer does not follow the schema: {detail}")]
    Schema { stage: String, detail: String },
    #[error("{domain}: unknown policy `{name}`")]
    UnknownPolicy { domain: String, name: String },
    #[error("{domain}: {detail}")]
    Params { domain: String, detail: String },
}

/// One provider exchange, kept for audit.
#[derive(Debug, Clone, Serialize)]
pub struct Transcript {
    pub stage: Stage,
    pub messages: Vec<ChatMessage>,
    pub replies: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DomainSelection {
    pub domain: String,
    pub set: PolicySet,
    pub selections: Vec<RawSelection>,
    pub composite: CompositePolicy,
}

impl DomainSelection {
    pub fn names(&self) -> BTreeSet<String> {
        self.selections.iter().map(|(n, _)| n.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub task: TaskSpec,
    pub domains: Vec<String>,
    pub selected: Vec<DomainSelection>,
    /// Predicted domains dropped because their bundle could not be fetched.
    pub excluded: Vec<(String, String)>,
    pub transcripts: Vec<Transcript>,
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(body) = t.strip_prefix("```") else { return t };
    let body = body.strip_prefix("json").unwrap_or(body);
    body.strip_suffix("```").unwrap_or(body).trim()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainsReply {
    domains: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PickDoc {
    name: String,
    #[serde(default)]
    params: Option<Map<String, Json>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoliciesReply {
    policies: Vec<PickDoc>,
}

fn normalize_domain(d: &str) -> Result<String, String> {
    let d = d.trim().trim_end_matches('.').to_ascii_lowercase();
    let d = d.strip_prefix("www.").unwrap_or(&d).to_owned();
    let ok = d.contains('.')
        && d.split('.').all(|l| {
            !l.is_empty() && !l.starts_with('-') && !l.ends_with('-') && l.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
        });
    if ok {
        Ok(d)
    } else {
        Err(format!("`{d}` is not a domain name"))
    }
}

pub fn parse_domains(raw: &str) -> Result<Vec<String>, String> {
    let reply: DomainsReply = serde_json::from_str(strip_fences(raw)).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for d in reply.domains {
        let d = normalize_domain(&d)?;
        if !out.contains(&d) {
            out.push(d);
        }
    }
    Ok(out)
}

enum PickError {
    Schema(String),
    Unknown(String),
    Params(String),
}

impl PickError {
    fn message(&self) -> &str {
        match self {
            PickError::Schema(m) | PickError::Unknown(m) | PickError::Params(m) => m,
        }
    }
}

fn parse_policies(raw: &str, set: &PolicySet) -> Result<(Vec<RawSelection>, CompositePolicy), PickError> {
    let reply: PoliciesReply = serde_json::from_str(strip_fences(raw)).map_err(|e| PickError::Schema(e.to_string()))?;
    let picks: Vec<RawSelection> = reply.policies.into_iter().map(|p| (p.name, p.params)).collect();
    for (name, _) in &picks {
        match set.get(name) {
            None => return Err(PickError::Unknown(name.clone())),
            Some(p) if p.effect == Effect::Deny => {
                return Err(PickError::Schema(format!("`{name}` is not a grantable policy")))
            }
            _ => {}
        }
    }
    match assemble_composite(set, &picks, &set.allowlist) {
        Ok(c) => Ok((picks, c)),
        Err(PolicyError::UnknownPolicy(n)) => Err(PickError::Unknown(n)),
        Err(e @ PolicyError::DuplicateSelection(_)) => Err(PickError::Schema(e.to_string())),
        Err(e) => Err(PickError::Params(e.to_string())),
    }
}

/// Calls the provider, retrying once with a correction message when the
/// answer fails `check`.
fn ask<T, E>(
    provider: &dyn Provider,
    task: &TaskSpec,
    stage: Stage,
    messages: Vec<ChatMessage>,
    check: impl Fn(&str) -> Result<T, E>,
    describe: impl Fn(&E) -> String,
) -> Result<(Result<T, E>, Transcript), ProviderError> {
    let mut req = ProviderRequest {
        task_id: task.id.clone(),
        task: task.text.clone(),
        stage: stage.clone(),
        messages,
    };
    let first = provider.complete(&req)?;
    let mut replies = vec![first.clone()];
    let outcome = match check(&first) {
        Ok(v) => Ok(v),
        Err(e) => {
            tracing::warn!(?stage, "provider answer rejected, retrying: {}", describe(&e));
            req.messages.extend(correction(&first, &describe(&e)));
            let second = provider.complete(&req)?;
            replies.push(second.clone());
            check(&second)
        }
    };
    Ok((
        outcome,
        Transcript {
            stage,
            messages: req.messages,
            replies,
        },
    ))
}

pub fn predict_domains(task: &TaskSpec, provider: &dyn Provider) -> Result<(Vec<String>, Transcript), SelectionError> {
    if task.text.trim().is_empty() {
        return Err(SelectionError::EmptyTask);
    }
    let (outcome, transcript) = ask(
        provider,
        task,
        Stage::Domains,
        domain_messages(&task.text),
        parse_domains,
        |e: &String| e.clone(),
    )?;
    let domains = outcome.map_err(|detail| SelectionError::Schema {
        stage: "domain".into(),
        detail,
    })?;
    Ok((domains, transcript))
}

pub fn select_policies(
    task: &TaskSpec,
    bundle: &Bundle,
    use_knowledge: bool,
    provider: &dyn Provider,
) -> Result<(DomainSelection, Transcript), SelectionError> {
    let domain = bundle.policies.domain.clone();
    let knowledge = bundle.knowledge.as_deref().filter(|_| use_knowledge);
    let messages = policy_messages(&task.text, &domain, &PolicyCard::from_set(&bundle.policies), knowledge);
    let set = &bundle.policies;
    let (outcome, transcript) = ask(
        provider,
        task,
        Stage::Policies { domain: domain.clone() },
        messages,
        |raw| parse_policies(raw, set),
        |e: &PickError| match e {
            PickError::Unknown(n) => format!("`{n}` is not one of the listed policies"),
            other => other.message().to_owned(),
        },
    )?;
    match outcome {
        Ok((selections, composite)) => Ok((
            DomainSelection {
                domain,
                set: set.clone(),
                selections,
                composite,
            },
            transcript,
        )),
        Err(PickError::Unknown(name)) => Err(SelectionError::UnknownPolicy { domain, name }),
        Err(PickError::Params(detail)) => Err(SelectionError::Params { domain, detail }),
        Err(PickError::Schema(detail)) => Err(SelectionError::Schema {
            stage: format!("policy ({domain})"),
            detail,
        }),
    }
}

#[derive(Debug, Clone)]
pub struct SelectOptions {
    pub use_knowledge: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions { use_knowledge: true }
    }
}

/// The whole pipeline for one task. Domains run in parallel; results keep
/// the predicted order.
pub fn select(
    task: &TaskSpec,
    source: &BundleSource,
    provider: &dyn Provider,
    opts: &SelectOptions,
) -> Result<SelectionResult, SelectionError> {
    let (domains, t0) = predict_domains(task, provider)?;
    if domains.is_empty() {
        return Err(SelectionError::Rejected(
            "the task does not say which web application to use".into(),
        ));
    }
    let per_domain: Vec<Result<Result<(DomainSelection, Transcript), SelectionError>, String>> =
        std::thread::scope(|s| {
            let handles: Vec<_> = domains
                .iter()
                .map(|d| {
                    s.spawn(move || {
                        let bundle = fetch_bundle(d, source).map_err(|e| e.to_string())?;
                        Ok(select_policies(task, &bundle, opts.use_knowledge, provider))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("selection thread panicked")).collect()
        });
    let mut result = SelectionResult {
        task: task.clone(),
        domains: domains.clone(),
        selected: Vec::new(),
        excluded: Vec::new(),
        transcripts: vec![t0],
    };
    for (d, r) in domains.iter().zip(per_domain) {
        match r {
            Err(fetch) => {
                tracing::warn!(domain = %d, "excluded: {fetch}");
                result.excluded.push((d.clone(), fetch));
            }
            Ok(sel) => {
                let (sel, t) = sel?;
                result.selected.push(sel);
                result.transcripts.push(t);
            }
        }
    }
    if result.selected.is_empty() {
        return Err(SelectionError::Rejected(format!(
            "no policy bundle available for {}",
            domains.join(", ")
        )));
    }
    Ok(result)
}
