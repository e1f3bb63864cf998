use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written once per output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: Vec<String>,
    /// Effective configuration of the run.
    pub config: serde_json::Value,
    pub config_digest: String,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<FileDigest>,
    /// Output files relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub wall_time_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_digest(path: &Path, label: String) -> io::Result<FileDigest> {
    Ok(FileDigest { path: label, sha256: sha256_hex(&fs::read(path)?) })
}

impl RunManifest {
    pub fn new(config: serde_json::Value, seed: u64, inputs: &[PathBuf]) -> io::Result<Self> {
        let canonical = serde_json::to_vec(&config).map_err(io::Error::other)?;
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: std::env::args().collect(),
            config_digest: sha256_hex(&canonical),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: inputs.iter().map(|p| file_digest(p, p.display().to_string())).collect::<io::Result<_>>()?,
            outputs: Vec::new(),
            wall_time_seconds: 0.0,
        })
    }

    /// Digests the listed outputs and writes the manifest into `out`.
    pub fn finish(mut self, out: &Path, outputs: &[&str], seconds: f64) -> io::Result<()> {
        self.outputs =
            outputs.iter().map(|name| file_digest(&out.join(name), name.to_string())).collect::<io::Result<_>>()?;
        self.wall_time_seconds = seconds;
        let text = serde_json::to_string_pretty(&self).map_err(io::Error::other)?;
        fs::write(out.join(MANIFEST_FILE), text + "\n")
    }
}
