//! Fetching a domain's sitemap and policy set, from a local bundle directory
//! or from the domain's well-known URLs.

use std::path::{Path, PathBuf};
use std::time::Duration;

use cellgate_core::{parse_policy_set, parse_sitemap, PolicySet, Sitemap};

pub const SITEMAP_FILE: &str = "agent-sitemap.json";
pub const POLICIES_FILE: &str = "agent-policies.json";
pub const KNOWLEDGE_FILE: &str = "domain-knowledge.md";

#[derive(Debug, Clone)]
pub struct Bundle {
    pub sitemap: Sitemap,
    pub policies: PolicySet,
    pub knowledge: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("no bundle for {domain}: {detail}")]
    NotFound { domain: String, detail: String },
    #[error("fetching {url}: {detail}")]
    Http { url: String, detail: String },
    #[error("{domain}: {detail}")]
    Validation { domain: String, detail: String },
}

#[derive(Debug, Clone)]
pub enum BundleSource {
    /// `<dir>/<domain>/agent-sitemap.json` and friends.
    Dir(PathBuf),
    /// `<base>/.well-known/agent-sitemap.json` and `.../agent-policies.json`,
    /// where `{domain}` in `base` is replaced by the domain.
    WellKnown { base: String },
}

impl BundleSource {
    pub fn well_known() -> BundleSource {
        BundleSource::WellKnown {
            base: "https://{domain}".into(),
        }
    }
}

fn validate(domain: &str, sitemap: &[u8], policies: &[u8], knowledge: Option<String>) -> Result<Bundle, FetchError> {
    let invalid = |detail: String| FetchError::Validation {
        domain: domain.to_owned(),
        detail,
    };
    let sitemap = parse_sitemap(sitemap).map_err(|e| invalid(format!("sitemap: {e}")))?;
    let policies = parse_policy_set(policies, &sitemap).map_err(|e| invalid(format!("policies: {e}")))?;
    if sitemap.domain != domain {
        return Err(invalid(format!("sitemap is for {}", sitemap.domain)));
    }
    Ok(Bundle {
        sitemap,
        policies,
        knowledge,
    })
}

/// Reads one domain directory (the directory that holds the documents).
pub fn load_dir(dir: &Path) -> Result<Bundle, FetchError> {
    let domain = dir
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let read = |name: &str| {
        std::fs::read(dir.join(name)).map_err(|e| FetchError::NotFound {
            domain: domain.clone(),
            detail: format!("{}: {e}", dir.join(name).display()),
        })
    };
    let sitemap = read(SITEMAP_FILE)?;
    let policies = read(POLICIES_FILE)?;
    let knowledge = std::fs::read_to_string(dir.join(KNOWLEDGE_FILE)).ok();
    // The directory name is only a hint; trust the document's domain.
    let declared = parse_sitemap(&sitemap)
        .map(|s| s.domain)
        .map_err(|e| FetchError::Validation {
            domain: domain.clone(),
            detail: format!("sitemap: {e}"),
        })?;
    validate(&declared, &sitemap, &policies, knowledge)
}

pub fn fetch_bundle(domain: &str, source: &BundleSource) -> Result<Bundle, FetchError> {
    match source {
        BundleSource::Dir(root) => {
            let dir = root.join(domain);
            if !dir.is_dir() {
                return Err(FetchError::NotFound {
                    domain: domain.to_owned(),
                    detail: format!("{} does not exist", dir.display()),
                });
            }
            let b = load_dir(&dir)?;
            if b.sitemap.domain != domain {
                return Err(FetchError::Validation {
                    domain: domain.to_owned(),
                    detail: format!("sitemap is for {}", b.sitemap.domain),
                });
            }
            Ok(b)
        }
        BundleSource::WellKnown { base } => {
            let base = base.replace("{domain}", domain);
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(20))
                .build()
                .map_err(|e| FetchError::Http {
                    url: domain.to_owned(),
                    detail: e.to_string(),
                })?;
            let get = |file: &str| -> Result<Vec<u8>, FetchError> {
                let url = format!("{}/.well-known/{file}", base.trim_end_matches('/'));
                let resp = client.get(&url).send().map_err(|e| FetchError::Http {
                    url: url.clone(),
                    detail: e.to_string(),
                })?;
                if resp.status() == reqwest::StatusCode::NOT_FOUND {
                    return Err(FetchError::NotFound {
                        domain: domain.to_owned(),
                        detail: format!("{url} returned 404"),
                    });
                }
                if !resp.status().is_success() {
                    return Err(FetchError::Http {
                        url,
                        detail: format!("HTTP {}", resp.status()),
                    });
                }
                resp.bytes().map(|b| b.to_vec()).map_err(|e| FetchError::Http {
                    url,
                    detail: e.to_string(),
                })
            };
            let sitemap = get(SITEMAP_FILE)?;
            let policies = get(POLICIES_FILE)?;
            validate(domain, &sitemap, &policies, None)
        }
    }
}

/// Domain directories under `root`, sorted by name.
pub fn list_domains(root: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(root)? {
        let e = e?;
        if e.path().join(SITEMAP_FILE).is_file() {
            out.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}
