//! The `manifest.json` every command leaves in its output directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use textspotter::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of `config_toml`.
    pub config_hash: String,
    /// The resolved configuration, defaults and overrides applied.
    pub config_toml: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// Files written by the command, relative to `output_dir`.
    pub artifacts: Vec<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn config_hash(toml: &str) -> String {
    Sha256::digest(toml.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &Config, output_dir: &Path, started: u128) -> Self {
        let config_toml = config.to_toml_string();
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_hash: config_hash(&config_toml),
            config_toml,
            seed: config.train.seed,
            output_dir: output_dir.to_path_buf(),
            started_unix_ms: started,
            finished_unix_ms: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn write(mut self, artifacts: Vec<String>) -> std::io::Result<()> {
        self.artifacts = artifacts;
        self.finished_unix_ms = now_ms();
        let json = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(self.output_dir.join(MANIFEST_FILE), json + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            config_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
