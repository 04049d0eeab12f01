//! `<command>-manifest.json`: what ran and what it produced.
//!
//! No timestamps or absolute paths, so an identical rerun writes an identical
//! manifest.

use std::path::{Path, PathBuf};

use jackpot::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Config, Precision};

#[derive(Debug, Serialize)]
pub struct Output {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    /// Hash of the effective configuration after flag overrides.
    pub config_sha256: String,
    pub seed: u64,
    pub precision: Precision,
    pub outputs: Vec<Output>,
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `path` relative to `base` when it lies inside it.
fn display_path(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

impl Manifest {
    pub fn new(command: &str, cfg: &Config, out_dir: &Path, files: &[PathBuf]) -> Result<Manifest> {
        let canonical = serde_json::to_vec(cfg)?;
        let mut outputs = Vec::with_capacity(files.len());
        for f in files {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            outputs.push(Output { path: display_path(f, out_dir), sha256: hex_sha256(&bytes) });
        }
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: hex_sha256(&canonical),
            seed: cfg.run.seed,
            precision: cfg.run.precision,
            outputs,
        })
    }

    /// Writes `<out_dir>/<command>-manifest.json` and returns its path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("{}-manifest.json", self.command.replace(' ', "-")));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
