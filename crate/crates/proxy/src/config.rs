use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use cellgate_core::LockoutConfig;
use rustls::pki_types::CertificateDer;

use crate::tls::CertAuthority;

/// What to do with hosts outside every loaded domain and allowlist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Refuse them.
    #[default]
    Strict,
    /// Forward them unmediated and record that they were seen.
    Observe,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        match s {
            "strict" => Ok(Mode::Strict),
            "observe" => Ok(Mode::Observe),
            other => Err(format!("unknown mode `{other}` (expected strict or observe)")),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Strict => "strict",
            Mode::Observe => "observe",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: SocketAddr,
    pub mode: Mode,
    /// Without a CA, CONNECT tunnels cannot be inspected.
    pub ca: Option<Arc<CertAuthority>>,
    /// Shared secret for the control and context endpoints.
    pub token: String,
    pub audit_path: Option<PathBuf>,
    /// Sends traffic for a host (or `*` for all) to a fixed plaintext
    /// address instead of the real origin. Used for hermetic runs.
    pub upstream_overrides: HashMap<String, SocketAddr>,
    /// Extra trust anchors for upstream TLS.
    pub upstream_roots: Vec<CertificateDer<'static>>,
    pub lockout: LockoutConfig,
    pub upstream_timeout: std::time::Duration,
}

impl ProxyConfig {
    pub fn new(listen: SocketAddr, token: impl Into<String>) -> ProxyConfig {
        ProxyConfig {
            listen,
            mode: Mode::Strict,
            ca: None,
            token: token.into(),
            audit_path: None,
            upstream_overrides: HashMap::new(),
            upstream_roots: Vec::new(),
            lockout: LockoutConfig::default(),
            upstream_timeout: std::time::Duration::from_secs(30),
        }
    }

    pub fn override_for(&self, hostname: &str) -> Option<SocketAddr> {
        self.upstream_overrides
            .get(&hostname.to_ascii_lowercase())
            .or_else(|| self.upstream_overrides.get("*"))
            .copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_prefer_exact_host() {
        let mut c = ProxyConfig::new("127.0.0.1:0".parse().unwrap(), "t");
        let a: SocketAddr = "127.0.0.1:1".parse().unwrap();
        let b: SocketAddr = "127.0.0.1:2".parse().unwrap();
        assert_eq!(c.override_for("x"), None);
        c.upstream_overrides.insert("*".into(), a);
        c.upstream_overrides.insert("gitlab.com".into(), b);
        assert_eq!(c.override_for("GitLab.com"), Some(b));
        assert_eq!(c.override_for("evil.example"), Some(a));
        assert_eq!("observe".parse::<Mode>(), Ok(Mode::Observe));
        assert!("loose".parse::<Mode>().is_err());
    }
}
