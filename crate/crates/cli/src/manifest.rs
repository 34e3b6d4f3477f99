use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use frailscan::Error;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Provenance of one run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub versions: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> frailscan::Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest(role: &str, path: &Path) -> frailscan::Result<FileDigest> {
    Ok(FileDigest {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

pub struct ManifestBuilder {
    command: String,
    config: Value,
    seed: u64,
    inputs: Vec<(String, PathBuf)>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: Value, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.to_path_buf()));
    }

    /// Hashes inputs and outputs and writes `manifest.json` into `out`.
    pub fn finish(self, out: &Path, outputs: &[&str]) -> frailscan::Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|(role, p)| digest(role, p))
            .collect::<frailscan::Result<Vec<_>>>()?;
        let outputs = outputs
            .iter()
            .map(|name| digest(name, &out.join(name)))
            .collect::<frailscan::Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            versions: serde_json::json!({
                "frailscan": env!("CARGO_PKG_VERSION"),
            }),
            inputs,
            outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        frailscan::report::write_json(&out.join("manifest.json"), &manifest)
    }
}
