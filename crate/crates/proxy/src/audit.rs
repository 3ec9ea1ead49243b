//! JSON-lines audit trail, one record per intercepted request.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use cellgate_core::{Enforcement, Verdict};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

const MAX_URL_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnforcementRecord {
    pub timestamp_ms: u64,
    pub session_id: String,
    pub method: String,
    pub url: String,
    /// `allowlisted`, `pass_through`, `matched`, or `refused` for hosts the
    /// session may not reach at all.
    pub route: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic_action: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_domain: Option<String>,
    /// `allow`, `deny` or `deny_by_error`.
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocked_by: Option<String>,
    pub latency_us: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upstream_status: Option<u16>,
}

impl EnforcementRecord {
    pub fn new(session_id: &str, method: &str, url: &str) -> EnforcementRecord {
        EnforcementRecord {
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            session_id: session_id.to_owned(),
            method: method.to_owned(),
            url: truncate(url, MAX_URL_LEN),
            route: "refused".into(),
            semantic_action: None,
            policy_domain: None,
            verdict: "deny".into(),
            reason: None,
            blocked_by: None,
            latency_us: 0,
            upstream_status: None,
        }
    }

    pub fn apply(&mut self, e: &Enforcement) {
        self.route = e.route.as_str().to_owned();
        self.semantic_action = e.semantic_action.clone();
        self.policy_domain = Some(e.policy_domain.clone());
        self.verdict = e.verdict.label().to_owned();
        self.reason = match &e.verdict {
            Verdict::DenyByError(r) => Some(r.clone()),
            _ => None,
        };
        self.blocked_by = e.blocked_by.clone();
    }

    pub fn refused(&mut self, reason: &str) {
        self.route = "refused".into();
        self.verdict = "deny".into();
        self.reason = Some(reason.to_owned());
    }

    pub fn pass_through_unmediated(&mut self) {
        self.route = "pass_through".into();
        self.verdict = "allow".into();
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_owned();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &s[..end])
}

/// In-memory records per session plus an optional file sink fed through a
/// channel so writes are serialized.
#[derive(Debug, Clone)]
pub struct AuditLog {
    by_session: Arc<Mutex<HashMap<String, Vec<EnforcementRecord>>>>,
    sink: Option<mpsc::UnboundedSender<EnforcementRecord>>,
}

impl AuditLog {
    pub fn in_memory() -> AuditLog {
        AuditLog {
            by_session: Arc::default(),
            sink: None,
        }
    }

    /// Appends to `path`, creating it if needed. Must be called inside a
    /// tokio runtime.
    pub fn with_file(path: &Path) -> std::io::Result<AuditLog> {
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let (tx, mut rx) = mpsc::unbounded_channel::<EnforcementRecord>();
        tokio::task::spawn_blocking(move || {
            while let Some(rec) = rx.blocking_recv() {
                let mut line = serde_json::to_vec(&rec).expect("record serializes");
                line.push(b'\n');
                if let Err(e) = file.write_all(&line).and_then(|_| file.flush()) {
                    tracing::error!("audit write failed: {e}");
                }
            }
        });
        Ok(AuditLog {
            by_session: Arc::default(),
            sink: Some(tx),
        })
    }

    pub fn append(&self, rec: EnforcementRecord) {
        if let Some(tx) = &self.sink {
            let _ = tx.send(rec.clone());
        }
        self.by_session.lock().entry(rec.session_id.clone()).or_default().push(rec);
    }

    pub fn records(&self, session_id: &str) -> Vec<EnforcementRecord> {
        self.by_session.lock().get(session_id).cloned().unwrap_or_default()
    }

    pub fn total(&self) -> usize {
        self.by_session.lock().values().map(Vec::len).sum()
    }
}
