//! Run directories and their manifest. The manifest is written before any
//! work starts and rewritten whenever an artifact is added, so an
//! interrupted run still records what it was doing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub started: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    /// SHA-256 of the running executable.
    pub code_digest: String,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Finished,
    Failed(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn code_digest() -> String {
    std::env::current_exe()
        .and_then(std::fs::read)
        .map(|b| sha256_hex(&b))
        .unwrap_or_else(|_| "unknown".into())
}

/// A run directory with a live manifest.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Creates `<out_dir>/<command>-<UTC timestamp>-<config digest>` and
    /// writes the initial manifest.
    pub fn start(out_dir: &Path, command: &str, argv: Vec<String>, config: &RunConfig, seeds: BTreeMap<String, u64>) -> Result<Self> {
        let config_digest = sha256_hex(config.to_toml().as_bytes());
        let now = chrono::Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.3fZ");
        let dir = out_dir.join(format!("{command}-{stamp}-{}", &config_digest[..12]));
        std::fs::create_dir_all(&dir).at(&dir)?;
        let manifest = RunManifest {
            command: command.into(),
            argv,
            started: now.to_rfc3339(),
            config: config.clone(),
            config_digest,
            seeds,
            artifacts: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            code_digest: code_digest(),
            status: RunStatus::Running,
        };
        let run = Self { dir, manifest };
        run.write()?;
        Ok(run)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn write(&self) -> Result<()> {
        crate::report::write_json(&self.path(MANIFEST_FILE), &self.manifest)
    }

    /// Records artifacts (deduplicated, in order) and rewrites the manifest.
    pub fn record<I: IntoIterator<Item = PathBuf>>(&mut self, paths: I) -> Result<()> {
        for p in paths {
            if !self.manifest.artifacts.contains(&p) {
                self.manifest.artifacts.push(p);
            }
        }
        self.write()
    }

    pub fn finish(&mut self, status: RunStatus) -> Result<()> {
        self.manifest.status = status;
        self.write()
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
