//! Deterministic artifact output: JSON / CSV files plus a SHA-256 manifest.
//!
//! Files are written exactly once per run, contain no timestamps, and embed
//! the resolved config through the caller's envelope, so identical configs
//! and seeds reproduce identical bytes. The manifest is written last and
//! lists every artifact with its digest; it carries the same envelope, which
//! makes the whole output directory self-describing.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{CliError, CliResult, SCHEMA_VERSION};

#[derive(Debug, Clone, Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
    bytes: usize,
}

/// Collects artifacts for one command run and finishes with `manifest.json`.
pub struct ArtifactWriter {
    dir: PathBuf,
    command: &'static str,
    entries: Vec<ManifestEntry>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, command: &'static str) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| {
            CliError::Config(format!("cannot create output directory {}: {e}", dir.display()))
        })?;
        Ok(Self { dir: dir.to_path_buf(), command, entries: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Wraps a command-specific body in the common envelope.
    pub fn envelope(
        &self,
        config: &ExperimentConfig,
        body: serde_json::Value,
    ) -> serde_json::Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "seed": config.sim.seed,
            "resolved_config": config,
            "body": body,
        })
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Numeric(format!("artifact serialization failed: {e}")))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        self.write_bytes(name, text.as_bytes())
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Numeric(format!("cannot write {}: {e}", path.display())))?;
        self.entries.push(ManifestEntry {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// Writes `manifest.json` and returns its path. Entries are sorted by
    /// file name so the manifest does not depend on write order.
    pub fn finish(mut self, config: &ExperimentConfig) -> CliResult<PathBuf> {
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "seed": config.sim.seed,
            "resolved_config": config,
            "artifacts": self.entries,
        });
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Numeric(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text.as_bytes())
            .map_err(|e| CliError::Numeric(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Scientific-notation CSV cell: Rust's float formatting is shortest
/// round-trip, so written values parse back bit-exactly.
pub fn csv_cell(v: f64) -> String {
    format!("{v:e}")
}
