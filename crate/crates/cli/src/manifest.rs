use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command as Process;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Provenance record written before a command starts working.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub git_hash: String,
    /// Input artifact name to content hash.
    pub inputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
    pub started_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file, or of the manifest inside an artifact directory.
pub fn input_hash(path: &Path) -> Result<String, CliError> {
    let file = if path.is_dir() {
        ["space.json", "manifest.json"]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| CliError::Io(format!("{}: no manifest in directory", path.display())))?
    } else {
        path.to_path_buf()
    };
    let bytes = std::fs::read(&file).map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
    Ok(sha256_hex(&bytes))
}

fn git_hash() -> String {
    Process::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, inputs: BTreeMap<String, String>) -> Manifest {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config_sha256: sha256_hex(cfg.canonical().as_bytes()),
            git_hash: git_hash(),
            inputs,
            config: cfg.clone(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        let path = out.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(out: &Path) -> Result<Manifest, CliError> {
        let path = out.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
