//! Run manifests written next to every output artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::settings::Settings;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: PathBuf,
    /// SHA-256 of the file, or of its delimited rows with `excluded_columns`
    /// removed. Absent for outputs that embed wall-clock measurements.
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments that reproduce the run without any config file.
    pub command: Vec<String>,
    pub resolved_config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, OutputRecord>,
    pub seed: u64,
    pub workers: usize,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    /// Run facts that are not outputs, such as timings and skip counts.
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a CSV file with the named columns dropped from every row.
pub fn csv_digest_excluding(bytes: &[u8], excluded: &[&str]) -> Result<String, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut keep = Vec::new();
    let mut canon = String::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::runtime(e.to_string()))?;
        if i == 0 {
            keep = record.iter().map(|h| !excluded.contains(&h)).collect();
        }
        let kept: Vec<&str> = record
            .iter()
            .zip(keep.iter().chain(std::iter::repeat(&true)))
            .filter(|(_, k)| **k)
            .map(|(f, _)| f)
            .collect();
        canon.push_str(&kept.join("\u{1f}"));
        canon.push('\n');
    }
    Ok(sha256_hex(canon.as_bytes()))
}

/// Absolute form of a path whose parent exists.
pub fn absolute(path: &Path) -> PathBuf {
    if let Ok(p) = path.canonicalize() {
        return p;
    }
    match (path.parent(), path.file_name()) {
        (Some(parent), Some(name)) => {
            let parent = if parent.as_os_str().is_empty() { Path::new(".") } else { parent };
            parent
                .canonicalize()
                .map(|p| p.join(name))
                .unwrap_or_else(|_| path.to_path_buf())
        }
        _ => path.to_path_buf(),
    }
}

/// `dir/stem.suffix` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Collects a run's facts and writes the manifest when finished.
pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start(subcommand: &str, settings: &Settings) -> Self {
        Self {
            manifest: RunManifest {
                subcommand: subcommand.into(),
                command: Vec::new(),
                resolved_config: settings.map().clone(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                seed: settings.parse("seed").unwrap_or(0),
                workers: settings.parse("workers").unwrap_or(1),
                tool_version: TOOL_VERSION.into(),
                started_at: now(),
                finished_at: String::new(),
                notes: BTreeMap::new(),
            },
        }
    }

    /// `args` are the subcommand's own flags; the settings are appended.
    pub fn command(&mut self, args: Vec<String>, settings: &Settings) {
        let mut cmd = vec![self.manifest.subcommand.clone()];
        cmd.extend(args);
        cmd.extend(settings.to_args());
        self.manifest.command = cmd;
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.into(), absolute(path));
    }

    pub fn output(&mut self, name: &str, path: &Path, bytes: &[u8]) {
        self.manifest.outputs.insert(
            name.into(),
            OutputRecord {
                path: absolute(path),
                sha256: Some(sha256_hex(bytes)),
                excluded_columns: Vec::new(),
            },
        );
    }

    pub fn output_excluding(&mut self, name: &str, path: &Path, bytes: &[u8], excluded: &[&str]) -> Result<(), CliError> {
        self.manifest.outputs.insert(
            name.into(),
            OutputRecord {
                path: absolute(path),
                sha256: Some(csv_digest_excluding(bytes, excluded)?),
                excluded_columns: excluded.iter().map(|s| s.to_string()).collect(),
            },
        );
        Ok(())
    }

    pub fn volatile_output(&mut self, name: &str, path: &Path) {
        self.manifest.outputs.insert(
            name.into(),
            OutputRecord {
                path: absolute(path),
                sha256: None,
                excluded_columns: Vec::new(),
            },
        );
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.manifest.notes.insert(key.into(), value.into());
    }

    pub fn finish(mut self, path: &Path) -> Result<RunManifest, CliError> {
        self.manifest.finished_at = now();
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        limaml::store::write_atomic(path, text.as_bytes())?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: not a run manifest: {e}", path.display())))
}
