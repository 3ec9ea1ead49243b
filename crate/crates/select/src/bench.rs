//! Selection benchmark: domain prediction accuracy, policy selection
//! accuracy with over-permissive and restrictive rates, and argument
//! extraction accuracy over a labelled task set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use cellgate_core::value::value_map_from_json;
use cellgate_core::Effect;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use crate::bundle::{fetch_bundle, Bundle, BundleSource};
use crate::prompts::PROMPT_VERSION;
use crate::provider::{StubAnswer, StubProvider};
use crate::selector::{predict_domains, select_policies, TaskSpec};
use crate::Provider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Retail,
    Travel,
    VersionControl,
    MultiDomain,
    ZeroDomain,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Retail => "retail",
            Category::Travel => "travel",
            Category::VersionControl => "version_control",
            Category::MultiDomain => "multi_domain",
            Category::ZeroDomain => "zero_domain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchTask {
    pub id: String,
    pub task: String,
    #[serde(default)]
    pub domains: Vec<String>,
    /// Ground-truth policy names per domain.
    #[serde(default)]
    pub policies: BTreeMap<String, Vec<String>>,
    /// Ground-truth params per condition policy name.
    #[serde(default)]
    pub args: BTreeMap<String, Map<String, Json>>,
    pub category: Category,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("task {id}: {detail}")]
    Invalid { id: String, detail: String },
}

pub fn parse_dataset(text: &str) -> Result<Vec<BenchTask>, DatasetError> {
    let mut tasks: Vec<BenchTask> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: BenchTask = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        let invalid = |detail: String| DatasetError::Invalid {
            id: t.id.clone(),
            detail,
        };
        if tasks.iter().any(|o| o.id == t.id) {
            return Err(invalid("duplicate id".into()));
        }
        if (t.category == Category::ZeroDomain) != t.domains.is_empty() {
            return Err(invalid("zero_domain tasks, and only those, have no domains".into()));
        }
        let keys: BTreeSet<&String> = t.policies.keys().collect();
        if keys != t.domains.iter().collect() {
            return Err(invalid("policies must be given for exactly the listed domains".into()));
        }
        for name in t.args.keys() {
            if !t.policies.values().flatten().any(|p| p == name) {
                return Err(invalid(format!("args for `{name}`, which is not a ground-truth policy")));
            }
        }
        tasks.push(t);
    }
    Ok(tasks)
}

/// Checks the labels against the policy sets: every named policy exists, and
/// args are given exactly for condition policies that declare params.
pub fn check_labels(tasks: &[BenchTask], bundles: &BTreeMap<String, Bundle>) -> Result<(), DatasetError> {
    for t in tasks {
        let invalid = |detail: String| DatasetError::Invalid {
            id: t.id.clone(),
            detail,
        };
        for (domain, names) in &t.policies {
            let Some(b) = bundles.get(domain) else {
                return Err(invalid(format!("no bundle for {domain}")));
            };
            for n in names {
                let p = b.policies.get(n).ok_or_else(|| invalid(format!("{domain} has no policy `{n}`")))?;
                let needs = p.effect == Effect::Condition && p.condition.as_ref().is_some_and(|c| !c.params.is_empty());
                if needs != t.args.contains_key(n) {
                    return Err(invalid(format!("args for `{n}` must be given iff it takes params")));
                }
            }
        }
    }
    Ok(())
}

/// A provider that answers every task with its own ground truth.
pub fn echo_provider(tasks: &[BenchTask]) -> StubProvider {
    let answers = tasks
        .iter()
        .map(|t| {
            let policies = t
                .policies
                .iter()
                .map(|(d, names)| {
                    let picks: Vec<Json> = names
                        .iter()
                        .map(|n| match t.args.get(n) {
                            Some(p) => json!({"name": n, "params": p}),
                            None => json!({"name": n}),
                        })
                        .collect();
                    (d.clone(), Json::Array(picks))
                })
                .collect();
            (
                t.id.clone(),
                StubAnswer {
                    domains: Some(json!(t.domains)),
                    policies,
                },
            )
        })
        .collect();
    StubProvider::new(answers).with_label("echo")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainDiff {
    pub predicted: Vec<String>,
    pub extra: Vec<String>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskResult {
    pub id: String,
    pub category: Category,
    pub domains_truth: Vec<String>,
    pub domains_predicted: Option<Vec<String>>,
    pub domain_correct: bool,
    /// Per ground-truth domain; absent for zero-domain tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policies: Option<BTreeMap<String, DomainDiff>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub args_correct: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl TaskResult {
    pub fn over_permissive(&self) -> bool {
        self.policies.iter().flatten().any(|(_, d)| !d.extra.is_empty())
    }

    pub fn over_restrictive(&self) -> bool {
        self.policies.iter().flatten().any(|(_, d)| !d.missing.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
    pub rate: Option<f64>,
}

impl Ratio {
    fn of(hits: usize, total: usize) -> Ratio {
        Ratio {
            hits,
            total,
            rate: (total > 0).then(|| hits as f64 / total as f64),
        }
    }

    fn pct(&self) -> String {
        match self.rate {
            Some(r) => format!("{:>6.1}%", r * 100.0),
            None => "     -".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyStats {
    pub accuracy: Ratio,
    pub over_permissive: Ratio,
    pub over_restrictive: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub prompt_version: String,
    pub provider: String,
    pub domain_knowledge: bool,
    /// Keyed by the number of ground-truth domains ("0", "1", "2", "3+").
    pub domain_accuracy: BTreeMap<String, Ratio>,
    pub domain_overall: Ratio,
    pub policy_selection: BTreeMap<String, PolicyStats>,
    pub policy_overall: PolicyStats,
    pub argument_extraction: Ratio,
    pub tasks: Vec<TaskResult>,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub domain_knowledge: bool,
    pub jobs: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            domain_knowledge: true,
            jobs: 4,
        }
    }
}

fn bucket(n: usize) -> String {
    if n >= 3 {
        "3+".into()
    } else {
        n.to_string()
    }
}

fn same_params(truth: &Map<String, Json>, got: Option<&Map<String, Json>>) -> bool {
    let Some(got) = got else { return false };
    match (value_map_from_json(truth), value_map_from_json(got)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn evaluate(task: &BenchTask, bundles: &BTreeMap<String, Bundle>, provider: &dyn Provider, knowledge: bool) -> TaskResult {
    let spec = TaskSpec::with_id(task.id.clone(), task.task.clone());
    let mut errors = Vec::new();
    let predicted = match predict_domains(&spec, provider) {
        Ok((d, _)) => Some(d),
        Err(e) => {
            errors.push(format!("domains: {e}"));
            None
        }
    };
    let truth: BTreeSet<&String> = task.domains.iter().collect();
    let domain_correct = predicted.as_ref().is_some_and(|p| p.iter().collect::<BTreeSet<_>>() == truth);

    let mut result = TaskResult {
        id: task.id.clone(),
        category: task.category,
        domains_truth: task.domains.clone(),
        domains_predicted: predicted,
        domain_correct,
        policies: None,
        policy_correct: None,
        args_correct: None,
        errors: Vec::new(),
    };
    if task.domains.is_empty() {
        result.errors = errors;
        return result;
    }

    // Policy selection is scored on the labelled domains so that a domain
    // miss does not also count against it.
    let mut diffs = BTreeMap::new();
    let mut picked_params: BTreeMap<String, Option<Map<String, Json>>> = BTreeMap::new();
    for domain in &task.domains {
        let want: BTreeSet<String> = task.policies.get(domain).into_iter().flatten().cloned().collect();
        let got: BTreeSet<String> = match bundles.get(domain) {
            None => {
                errors.push(format!("{domain}: no bundle"));
                BTreeSet::new()
            }
            Some(b) => match select_policies(&spec, b, knowledge, provider) {
                Ok((sel, _)) => {
                    for (n, p) in &sel.selections {
                        picked_params.insert(n.clone(), p.clone());
                    }
                    sel.names()
                }
                Err(e) => {
                    errors.push(format!("{domain}: {e}"));
                    BTreeSet::new()
                }
            },
        };
        diffs.insert(
            domain.clone(),
            DomainDiff {
                predicted: got.iter().cloned().collect(),
                extra: got.difference(&want).cloned().collect(),
                missing: want.difference(&got).cloned().collect(),
            },
        );
    }
    result.policy_correct = Some(diffs.values().all(|d| d.extra.is_empty() && d.missing.is_empty()));
    result.policies = Some(diffs);
    if !task.args.is_empty() {
        result.args_correct = Some(
            task.args
                .iter()
                .all(|(name, want)| same_params(want, picked_params.get(name).and_then(|p| p.as_ref()))),
        );
    }
    result.errors = errors;
    result
}

/// Fetches the bundle of every labelled domain once.
pub fn load_bundles(tasks: &[BenchTask], source: &BundleSource) -> Result<BTreeMap<String, Bundle>, String> {
    let domains: BTreeSet<&String> = tasks.iter().flat_map(|t| &t.domains).collect();
    domains
        .into_iter()
        .map(|d| fetch_bundle(d, source).map(|b| (d.clone(), b)).map_err(|e| e.to_string()))
        .collect()
}

pub fn run_bench(
    tasks: &[BenchTask],
    bundles: &BTreeMap<String, Bundle>,
    provider: &dyn Provider,
    opts: &BenchOptions,
) -> BenchReport {
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<TaskResult>> = vec![None; tasks.len()];
    let jobs = opts.jobs.clamp(1, 64).min(tasks.len().max(1));
    let done: Vec<Vec<(usize, TaskResult)>> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..jobs)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(t) = tasks.get(i) else { break };
                        mine.push((i, evaluate(t, bundles, provider, opts.domain_knowledge)));
                    }
                    mine
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("bench worker panicked")).collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    let results: Vec<TaskResult> = slots.into_iter().map(|r| r.expect("every task evaluated")).collect();
    summarize(results, provider.label(), opts.domain_knowledge)
}

fn policy_stats<'a>(rs: impl Iterator<Item = &'a TaskResult> + Clone) -> PolicyStats {
    let scored: Vec<&TaskResult> = rs.filter(|r| r.policy_correct.is_some()).collect();
    let n = scored.len();
    PolicyStats {
        accuracy: Ratio::of(scored.iter().filter(|r| r.policy_correct == Some(true)).count(), n),
        over_permissive: Ratio::of(scored.iter().filter(|r| r.over_permissive()).count(), n),
        over_restrictive: Ratio::of(scored.iter().filter(|r| r.over_restrictive()).count(), n),
    }
}

fn summarize(tasks: Vec<TaskResult>, provider: String, domain_knowledge: bool) -> BenchReport {
    let mut buckets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in &tasks {
        let b = buckets.entry(bucket(t.domains_truth.len())).or_default();
        b.0 += t.domain_correct as usize;
        b.1 += 1;
    }
    let categories: BTreeSet<Category> = tasks.iter().map(|t| t.category).filter(|c| *c != Category::ZeroDomain).collect();
    let with_args: Vec<&TaskResult> = tasks.iter().filter(|t| t.args_correct.is_some()).collect();
    BenchReport {
        prompt_version: PROMPT_VERSION.into(),
        provider,
        domain_knowledge,
        domain_accuracy: buckets.into_iter().map(|(k, (h, n))| (k, Ratio::of(h, n))).collect(),
        domain_overall: Ratio::of(tasks.iter().filter(|t| t.domain_correct).count(), tasks.len()),
        policy_selection: categories
            .into_iter()
            .map(|c| (c.as_str().to_owned(), policy_stats(tasks.iter().filter(move |t| t.category == c))))
            .collect(),
        policy_overall: policy_stats(tasks.iter()),
        argument_extraction: Ratio::of(
            with_args.iter().filter(|t| t.args_correct == Some(true)).count(),
            with_args.len(),
        ),
        tasks,
    }
}

impl BenchReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "provider {}  prompts {}  domain knowledge {}",
            self.provider,
            self.prompt_version,
            if self.domain_knowledge { "on" } else { "off" }
        );
        let _ = writeln!(s, "\ndomain prediction");
        for (b, r) in &self.domain_accuracy {
            let _ = writeln!(s, "  {b:<3} domains  {}  ({}/{})", r.pct(), r.hits, r.total);
        }
        let r = &self.domain_overall;
        let _ = writeln!(s, "  overall      {}  ({}/{})", r.pct(), r.hits, r.total);
        let _ = writeln!(s, "\npolicy selection     accuracy  permissive  restrictive");
        let rows = self
            .policy_selection
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("overall", &self.policy_overall)));
        for (name, p) in rows {
            let _ = writeln!(
                s,
                "  {name:<18} {}     {}      {}",
                p.accuracy.pct(),
                p.over_permissive.pct(),
                p.over_restrictive.pct()
            );
        }
        let a = &self.argument_extraction;
        let _ = writeln!(s, "\nargument extraction  {}  ({}/{})", a.pct(), a.hits, a.total);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureTag {
    OverPermissive,
    OverRestrictive,
    /// Extra and missing policies at once; often the model picked a policy
    /// for the wrong object. Left for a human to confirm.
    NeedsReview,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaggedFailure {
    pub id: String,
    pub tags: BTreeSet<FailureTag>,
    pub policies: BTreeMap<String, DomainDiff>,
}

pub fn classify_failures(report: &BenchReport) -> Vec<TaggedFailure> {
    report
        .tasks
        .iter()
        .filter_map(|t| {
            let mut tags = BTreeSet::new();
            if t.over_permissive() {
                tags.insert(FailureTag::OverPermissive);
            }
            if t.over_restrictive() {
                tags.insert(FailureTag::OverRestrictive);
            }
            if tags.len() == 2 {
                tags.insert(FailureTag::NeedsReview);
            }
            (!tags.is_empty()).then(|| TaggedFailure {
                id: t.id.clone(),
                tags,
                policies: t.policies.clone().unwrap_or_default(),
            })
        })
        .collect()
}
