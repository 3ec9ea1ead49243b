//! Optional TOML config file. Values here apply only when neither a flag nor
//! an environment variable supplied them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub log_level: Option<String>,
    pub log_file: Option<PathBuf>,
    pub bundle_dir: Option<PathBuf>,
    pub well_known_base: Option<String>,
    pub stub: Option<PathBuf>,
    #[serde(default)]
    pub serve: ServeFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeFile {
    pub listen: Option<String>,
    pub mode: Option<String>,
    pub token: Option<String>,
    pub ca: Option<PathBuf>,
    pub ca_key: Option<PathBuf>,
    pub audit_log: Option<PathBuf>,
    pub session: Option<String>,
    #[serde(default)]
    pub composites: Vec<PathBuf>,
    pub lockout: Option<bool>,
    pub settle_timeout_ms: Option<u64>,
    #[serde(default)]
    pub upstream_overrides: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
