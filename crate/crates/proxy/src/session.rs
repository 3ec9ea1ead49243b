//! Per-session enforcement state and atomic table swaps.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use cellgate_core::context::{ArgCatalog, Clock, ContextCache, LockoutConfig};
use cellgate_core::policy::{parse_composite, parse_policy_set};
use cellgate_core::{compile, parse_sitemap, AuthTable, CompositePolicy, PolicySet, Sitemap};
use parking_lot::RwLock;
use serde::Deserialize;
use serde_json::Value as Json;

/// One domain's validated documents and compiled table.
#[derive(Debug, Clone)]
pub struct DomainBundle {
    pub sitemap: Sitemap,
    pub policies: PolicySet,
    pub composite: CompositePolicy,
    pub table: Arc<AuthTable>,
}

impl DomainBundle {
    pub fn new(sitemap: Sitemap, policies: PolicySet, composite: CompositePolicy) -> Result<DomainBundle, String> {
        let table = compile(&sitemap, &policies, &composite).map_err(|e| e.to_string())?;
        Ok(DomainBundle {
            sitemap,
            policies,
            composite,
            table: Arc::new(table),
        })
    }

    /// Builds a bundle from the three JSON documents.
    pub fn from_documents(sitemap: &Json, policies: &Json, composite: &Json) -> Result<DomainBundle, String> {
        let sitemap = parse_sitemap(sitemap.to_string().as_bytes()).map_err(|e| e.to_string())?;
        let policies = parse_policy_set(policies.to_string().as_bytes(), &sitemap).map_err(|e| e.to_string())?;
        let composite = parse_composite(composite.to_string().as_bytes(), &policies).map_err(|e| e.to_string())?;
        DomainBundle::new(sitemap, policies, composite)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleDoc {
    pub sitemap: Json,
    pub policies: Json,
    pub composite: Json,
}

/// Body of `POST /ctl/session`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionLoad {
    pub session_id: String,
    #[serde(default)]
    pub bundles: Vec<BundleDoc>,
}

/// An immutable snapshot of what a session enforces.
#[derive(Debug)]
pub struct SessionState {
    pub id: String,
    pub generation: u64,
    pub bundles: Vec<DomainBundle>,
    pub cache: Arc<ContextCache>,
}

/// How a host relates to a session's loaded domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostClass {
    Loaded,
    Allowlisted,
    ThirdParty,
}

impl SessionState {
    pub fn bundle_for_host(&self, hostname: &str) -> Option<&DomainBundle> {
        self.bundles.iter().find(|b| b.sitemap.covers_host(hostname))
    }

    pub fn classify_host(&self, hostname: &str) -> HostClass {
        if self.bundle_for_host(hostname).is_some() {
            HostClass::Loaded
        } else if self
            .bundles
            .iter()
            .any(|b| b.composite.allowlist.iter().any(|p| p.hostname().eq_ignore_ascii_case(hostname)))
        {
            HostClass::Allowlisted
        } else {
            HostClass::ThirdParty
        }
    }

    pub fn domains(&self) -> Vec<String> {
        self.bundles.iter().map(|b| b.sitemap.domain.clone()).collect()
    }
}

/// All sessions. Loading replaces a session's snapshot in one step; requests
/// already holding the old snapshot finish under it.
#[derive(Debug)]
pub struct SessionRegistry {
    sessions: RwLock<HashMap<String, Arc<SessionState>>>,
    generation: AtomicU64,
    lockout: LockoutConfig,
    clock: Arc<dyn Clock>,
}

impl SessionRegistry {
    pub fn new(lockout: LockoutConfig, clock: Arc<dyn Clock>) -> SessionRegistry {
        SessionRegistry {
            sessions: RwLock::new(HashMap::new()),
            generation: AtomicU64::new(0),
            lockout,
            clock,
        }
    }

    pub fn load(&self, session_id: &str, bundles: Vec<DomainBundle>) -> Result<Arc<SessionState>, String> {
        let mut seen = Vec::new();
        for b in &bundles {
            if seen.contains(&b.sitemap.domain) {
                return Err(format!("domain {} loaded twice", b.sitemap.domain));
            }
            seen.push(b.sitemap.domain.clone());
        }
        let catalog = ArgCatalog::from_sitemaps(bundles.iter().map(|b| &b.sitemap));
        let state = Arc::new(SessionState {
            id: session_id.to_owned(),
            generation: self.generation.fetch_add(1, Ordering::SeqCst) + 1,
            bundles,
            cache: Arc::new(ContextCache::new(catalog, self.lockout, self.clock.clone())),
        });
        self.sessions.write().insert(session_id.to_owned(), state.clone());
        Ok(state)
    }

    /// Validates every document before touching the registry.
    pub fn load_documents(&self, load: &SessionLoad) -> Result<Arc<SessionState>, String> {
        if load.session_id.is_empty() {
            return Err("empty session_id".into());
        }
        let bundles = load
            .bundles
            .iter()
            .map(|b| DomainBundle::from_documents(&b.sitemap, &b.policies, &b.composite))
            .collect::<Result<Vec<_>, _>>()?;
        self.load(&load.session_id, bundles)
    }

    pub fn get(&self, session_id: &str) -> Option<Arc<SessionState>> {
        self.sessions.read().get(session_id).cloned()
    }

    pub fn remove(&self, session_id: &str) -> bool {
        self.sessions.write().remove(session_id).is_some()
    }

    /// The session's snapshot, or an empty one for unknown sessions.
    pub fn snapshot(&self, session_id: &str) -> Arc<SessionState> {
        self.get(session_id).unwrap_or_else(|| {
            Arc::new(SessionState {
                id: session_id.to_owned(),
                generation: 0,
                bundles: Vec::new(),
                cache: Arc::new(ContextCache::new(ArgCatalog::default(), self.lockout, self.clock.clone())),
            })
        })
    }
}
