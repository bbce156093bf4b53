use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one CLI invocation, written into its run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub started_at: f64,
    pub finished_at: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_at: unix_now(),
            finished_at: 0.0,
            outputs: Vec::new(),
        }
    }

    /// Write `manifest.json` into `dir` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_at = unix_now();
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let body = serde_json::to_vec_pretty(&self)?;
        fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
