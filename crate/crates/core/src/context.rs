//! Per-session cache of DOM-sourced argument values delivered by an in-page
//! observer, with optional lockout that withholds reads until the effects of
//! the last state-changing action have been reported.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::pattern::{ParsedUrl, UrlPattern};
use crate::sitemap::{ArgSource, Sitemap, SitemapEntry};
use crate::value::{Value, ValueMap, ValueType};

pub const DEFAULT_SETTLE_TIMEOUT: Duration = Duration::from_secs(10);

/// Monotonic time source.
pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.0.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextValue {
    pub arg_name: String,
    pub value: Value,
    pub source_url: String,
    pub seq: u64,
    pub received_at: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContextError {
    #[error("no loaded sitemap declares a DOM argument `{0}`")]
    UnknownArg(String),
    #[error("argument `{arg}` is declared as {expected}, report says {found}")]
    TypeMismatch {
        arg: String,
        expected: ValueType,
        found: ValueType,
    },
    #[error("argument `{arg}`: {reason}")]
    BadValue { arg: String, reason: String },
    #[error("argument `{arg}` is not produced on `{url}`")]
    SourceMismatch { arg: String, url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("missing arguments {0:?}")]
    Missing(Vec<String>),
    #[error("arguments {0:?} await a pending action's effects")]
    Unsettled(Vec<String>),
    #[error("session context is stale after a settle timeout")]
    Stale,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("action `{action}` did not settle within {timeout:?}")]
pub struct SettleTimeout {
    pub action: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockoutConfig {
    pub enabled: bool,
    pub settle_timeout: Duration,
}

impl Default for LockoutConfig {
    fn default() -> Self {
        LockoutConfig {
            enabled: false,
            settle_timeout: DEFAULT_SETTLE_TIMEOUT,
        }
    }
}

/// DOM argument declarations gathered from a session's sitemaps.
#[derive(Debug, Clone, Default)]
pub struct ArgCatalog {
    dom: BTreeMap<String, Vec<(ValueType, UrlPattern)>>,
}

impl ArgCatalog {
    pub fn from_sitemaps<'a>(maps: impl IntoIterator<Item = &'a Sitemap>) -> ArgCatalog {
        let mut dom: BTreeMap<String, Vec<(ValueType, UrlPattern)>> = BTreeMap::new();
        for s in maps {
            for (name, ty, url) in s.dom_args() {
                dom.entry(name.to_owned()).or_default().push((ty, url.clone()));
            }
        }
        ArgCatalog { dom }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.dom.contains_key(name)
    }
}

#[derive(Debug, Clone)]
struct Pending {
    action: String,
    since: Duration,
}

#[derive(Debug, Default)]
struct SettleState {
    pending: Vec<Pending>,
    stale: bool,
}

/// Context for one agent session.
#[derive(Debug)]
pub struct ContextCache {
    catalog: ArgCatalog,
    values: RwLock<HashMap<String, ContextValue>>,
    settle: Mutex<SettleState>,
    clock: Arc<dyn Clock>,
    lockout: LockoutConfig,
}

impl ContextCache {
    pub fn new(catalog: ArgCatalog, lockout: LockoutConfig, clock: Arc<dyn Clock>) -> ContextCache {
        ContextCache {
            catalog,
            values: RwLock::new(HashMap::new()),
            settle: Mutex::new(SettleState::default()),
            clock,
            lockout,
        }
    }

    pub fn lockout(&self) -> LockoutConfig {
        self.lockout
    }

    /// Stores a report if its seq is newer than the stored one. An accepted
    /// report settles every pending action and clears a stale flag.
    pub fn ingest(
        &self,
        arg_name: &str,
        value: &serde_json::Value,
        value_type: ValueType,
        source_url: &str,
        seq: u64,
    ) -> Result<bool, ContextError> {
        let decls = self
            .catalog
            .dom
            .get(arg_name)
            .ok_or_else(|| ContextError::UnknownArg(arg_name.to_owned()))?;
        let url = ParsedUrl::parse(source_url).map_err(|e| ContextError::SourceMismatch {
            arg: arg_name.to_owned(),
            url: e.url,
        })?;
        let Some((declared, _)) = decls.iter().find(|(_, p)| p.matches(&url)) else {
            return Err(ContextError::SourceMismatch {
                arg: arg_name.to_owned(),
                url: source_url.to_owned(),
            });
        };
        if *declared != value_type {
            return Err(ContextError::TypeMismatch {
                arg: arg_name.to_owned(),
                expected: *declared,
                found: value_type,
            });
        }
        let value = Value::from_json_lenient(value, value_type).map_err(|e| ContextError::BadValue {
            arg: arg_name.to_owned(),
            reason: e.to_string(),
        })?;
        let mut values = self.values.write();
        if values.get(arg_name).is_some_and(|old| old.seq >= seq) {
            return Ok(false);
        }
        values.insert(
            arg_name.to_owned(),
            ContextValue {
                arg_name: arg_name.to_owned(),
                value,
                source_url: source_url.to_owned(),
                seq,
                received_at: self.clock.now(),
            },
        );
        drop(values);
        let mut settle = self.settle.lock();
        settle.pending.clear();
        settle.stale = false;
        Ok(true)
    }

    pub fn get(&self, arg_name: &str) -> Option<ContextValue> {
        self.values.read().get(arg_name).cloned()
    }

    /// Records that a state-changing action was forwarded. No-op unless
    /// lockout is enabled.
    pub fn mark_pending(&self, action: &str) {
        if !self.lockout.enabled {
            return;
        }
        let since = self.clock.now();
        self.settle.lock().pending.push(Pending {
            action: action.to_owned(),
            since,
        });
    }

    /// Whether no forwarded action awaits its effects. A pending action past
    /// the deadline flags the session stale and is reported as a timeout.
    pub fn is_settled(&self) -> Result<bool, SettleTimeout> {
        let now = self.clock.now();
        let mut settle = self.settle.lock();
        if let Some(p) = settle
            .pending
            .iter()
            .find(|p| now.saturating_sub(p.since) >= self.lockout.settle_timeout)
            .cloned()
        {
            settle.pending.clear();
            settle.stale = true;
            return Err(SettleTimeout {
                action: p.action,
                timeout: self.lockout.settle_timeout,
            });
        }
        Ok(settle.pending.is_empty())
    }

    pub fn is_stale(&self) -> bool {
        self.settle.lock().stale
    }

    /// Builds the argument map for a condition on `entry`. Request-sourced
    /// args come from `request_args`; everything else is read from the cache.
    pub fn resolve_args(
        &self,
        required: &[String],
        entry: &SitemapEntry,
        request_args: &ValueMap,
    ) -> Result<ValueMap, ResolveError> {
        let mut out = ValueMap::new();
        let mut missing = Vec::new();
        let mut dom_reads = Vec::new();
        for name in required {
            let request_sourced = entry.arg(name).is_some_and(|a| !matches!(a.source, ArgSource::Dom { .. }));
            if request_sourced {
                match request_args.get(name) {
                    Some(v) => {
                        out.insert(name.clone(), v.clone());
                    }
                    None => missing.push(name.clone()),
                }
            } else {
                dom_reads.push(name.clone());
            }
        }
        if !dom_reads.is_empty() && self.lockout.enabled {
            if self.is_stale() {
                return Err(ResolveError::Stale);
            }
            match self.is_settled() {
                Ok(true) => {}
                Ok(false) => return Err(ResolveError::Unsettled(dom_reads)),
                Err(_) => return Err(ResolveError::Stale),
            }
        }
        let values = self.values.read();
        for name in dom_reads {
            match values.get(&name) {
                Some(v) => {
                    out.insert(name, v.value.clone());
                }
                None => missing.push(name),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(ResolveError::Missing(missing))
        }
    }
}
