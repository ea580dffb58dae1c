use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub version: &'static str,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| CliError::Json { path: path.display().to_string(), source })?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Writes `manifest.json` into `out` listing every file in `files`.
pub fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    started: DateTime<Utc>,
    files: &[PathBuf],
) -> CliResult<()> {
    let outputs = files
        .iter()
        .map(|f| {
            Ok(OutputFile {
                path: f.strip_prefix(out).unwrap_or(f).display().to_string(),
                sha256: sha256_file(f)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = RunManifest {
        command: command.to_owned(),
        config,
        seed,
        started,
        finished: Utc::now(),
        version: env!("CARGO_PKG_VERSION"),
        outputs,
    };
    write_json(&out.join("manifest.json"), &manifest)
}
