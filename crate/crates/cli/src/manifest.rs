use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use jbm_core::config::TrainConfig;
use jbm_core::data::PreparedDataset;
use jbm_core::trainer::GridSpec;
use jbm_core::Error;

use crate::Failure;

/// Everything needed to replay a command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub version: &'static str,
    pub timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub fingerprints: BTreeMap<String, String>,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config: None,
            grid: None,
            best_epoch: None,
            fingerprints: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self).map_err(|e| Failure::from(Error::from(e)))?;
        fs::write(&path, body + "\n").map_err(|e| Failure::from(Error::io(path, e)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of every content file of a prepared dataset, keyed by file name.
pub fn fingerprint_dir(dir: &Path) -> Result<BTreeMap<String, String>, Failure> {
    let mut out = BTreeMap::new();
    for p in PreparedDataset::content_files(dir) {
        let bytes = fs::read(&p).map_err(|e| Failure::from(Error::io(&p, e)))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.insert(name, sha256_hex(&bytes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
