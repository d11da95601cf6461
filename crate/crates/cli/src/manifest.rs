//! Run manifests written next to each primary output as `<output>.manifest.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// SHA-256 of `settings` serialized as compact JSON.
    pub config_digest: String,
    pub settings: serde_json::Value,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub notes: Vec<String>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn file_record(path: &Path) -> anyhow::Result<FileRecord> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(FileRecord { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 })
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Collects run details and writes the manifest once outputs exist.
pub struct Recorder {
    subcommand: &'static str,
    started_at: String,
    inputs: Vec<PathBuf>,
    settings: serde_json::Value,
    seed: Option<u64>,
    notes: Vec<String>,
}

impl Recorder {
    pub fn start<S: Serialize>(subcommand: &'static str, settings: &S, seed: Option<u64>) -> Self {
        Self {
            subcommand,
            started_at: now(),
            inputs: Vec::new(),
            settings: serde_json::to_value(settings).unwrap_or(serde_json::Value::Null),
            seed,
            notes: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Writes `<primary>.manifest.json` and returns its path.
    pub fn finish(self, primary: &Path, extra_outputs: &[PathBuf]) -> anyhow::Result<PathBuf> {
        let inputs = self.inputs.iter().map(|p| file_record(p)).collect::<anyhow::Result<_>>()?;
        let outputs = std::iter::once(primary.to_path_buf())
            .chain(extra_outputs.iter().cloned())
            .map(|p| file_record(&p))
            .collect::<anyhow::Result<_>>()?;
        let settings_json = serde_json::to_vec(&self.settings)?;
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs,
            config_digest: hex::encode(Sha256::digest(&settings_json)),
            settings: self.settings,
            seed: self.seed,
            started_at: self.started_at,
            finished_at: now(),
            notes: self.notes,
        };
        let path = manifest_path(primary);
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(path)
    }
}
