//! Local interception CA and per-host leaf certificates.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose, IsCa, KeyPair,
    KeyUsagePurpose,
};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer};
use rustls::ServerConfig;

const CA_COMMON_NAME: &str = "cellgate local CA";

#[derive(Debug, thiserror::Error)]
pub enum TlsError {
    #[error("certificate generation: {0}")]
    Rcgen(#[from] rcgen::Error),
    #[error("rustls: {0}")]
    Rustls(#[from] rustls::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad CA material: {0}")]
    BadCa(String),
}

fn ca_params() -> CertificateParams {
    let mut params = CertificateParams::default();
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, CA_COMMON_NAME);
    dn.push(DnType::OrganizationName, "cellgate");
    params.distinguished_name = dn;
    params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    params.key_usages = vec![
        KeyUsagePurpose::KeyCertSign,
        KeyUsagePurpose::CrlSign,
        KeyUsagePurpose::DigitalSignature,
    ];
    params
}

/// Generates a CA and returns `(cert_pem, key_pem)`.
pub fn generate_ca() -> Result<(String, String), TlsError> {
    let key = KeyPair::generate()?;
    let cert = ca_params().self_signed(&key)?;
    Ok((cert.pem(), key.serialize_pem()))
}

pub fn write_ca(cert_path: &Path, key_path: &Path) -> Result<(), TlsError> {
    let (cert, key) = generate_ca()?;
    std::fs::write(cert_path, cert)?;
    std::fs::write(key_path, key)?;
    Ok(())
}

/// Signs leaf certificates for intercepted hosts.
pub struct CertAuthority {
    /// DER of the certificate clients trust.
    ca_der: CertificateDer<'static>,
    issuer: rcgen::Certificate,
    key: KeyPair,
    leaves: Mutex<HashMap<String, Arc<ServerConfig>>>,
}

impl std::fmt::Debug for CertAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertAuthority").finish_non_exhaustive()
    }
}

impl CertAuthority {
    /// Loads a CA written by [`generate_ca`]. The issuer used for signing is
    /// rebuilt from the key with the same name, so leaves chain to the
    /// certificate on disk.
    pub fn from_pem(cert_pem: &str, key_pem: &str) -> Result<CertAuthority, TlsError> {
        let key = KeyPair::from_pem(key_pem)?;
        let ca_der = CertificateDer::from_pem_slice(cert_pem.as_bytes())
            .map_err(|e| TlsError::BadCa(format!("certificate: {e}")))?;
        let raw = key.public_key_raw();
        if !ca_der.windows(raw.len()).any(|w| w == raw) {
            return Err(TlsError::BadCa("key does not belong to the certificate".into()));
        }
        let issuer = ca_params().self_signed(&key)?;
        Ok(CertAuthority {
            ca_der,
            issuer,
            key,
            leaves: Mutex::new(HashMap::new()),
        })
    }

    pub fn load(cert_path: &Path, key_path: &Path) -> Result<CertAuthority, TlsError> {
        let cert = std::fs::read_to_string(cert_path)?;
        let key = std::fs::read_to_string(key_path)?;
        CertAuthority::from_pem(&cert, &key)
    }

    pub fn generate() -> Result<CertAuthority, TlsError> {
        let (cert, key) = generate_ca()?;
        CertAuthority::from_pem(&cert, &key)
    }

    pub fn ca_der(&self) -> &CertificateDer<'static> {
        &self.ca_der
    }

    /// TLS config presenting a leaf for `host`, cached per host.
    pub fn server_config(&self, host: &str) -> Result<Arc<ServerConfig>, TlsError> {
        let host = host.to_ascii_lowercase();
        if let Some(cfg) = self.leaves.lock().get(&host) {
            return Ok(cfg.clone());
        }
        let mut params = CertificateParams::new(vec![host.clone()])?;
        params.distinguished_name.push(DnType::CommonName, host.as_str());
        params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth];
        params.use_authority_key_identifier_extension = true;
        let leaf_key = KeyPair::generate()?;
        let leaf = params.signed_by(&leaf_key, &self.issuer, &self.key)?;
        let chain = vec![leaf.der().clone(), self.ca_der.clone()];
        let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(leaf_key.serialize_der()));
        let mut cfg = ServerConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
            .with_safe_default_protocol_versions()?
            .with_no_client_auth()
            .with_single_cert(chain, key)?;
        cfg.alpn_protocols = vec![b"http/1.1".to_vec()];
        let cfg = Arc::new(cfg);
        self.leaves.lock().insert(host, cfg.clone());
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_configs_are_cached_per_host() {
        let ca = CertAuthority::generate().unwrap();
        let a = ca.server_config("gitlab.com").unwrap();
        let b = ca.server_config("GitLab.com").unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let c = ca.server_config("127.0.0.1").unwrap();
        assert!(!Arc::ptr_eq(&a, &c));
    }

    #[test]
    fn mismatched_key_is_rejected() {
        let (cert, _) = generate_ca().unwrap();
        let (_, other_key) = generate_ca().unwrap();
        assert!(matches!(CertAuthority::from_pem(&cert, &other_key), Err(TlsError::BadCa(_))));
        assert!(CertAuthority::from_pem("not pem", &other_key).is_err());
    }
}
