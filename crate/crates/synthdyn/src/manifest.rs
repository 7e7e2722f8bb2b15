//! Run manifests: what a command read, with which settings, and what it
//! wrote, identified by SHA-256. No timestamps, so reruns compare equal.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.display().to_string(), sha256: sha256_file(path)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub precision: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(Error::io(path))?))
}

impl RunManifest {
    pub fn new(command: &str, precision: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            precision: precision.into(),
            config_sha256: sha256_hex(config.to_json().as_bytes()),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Records outputs by file name (relative to the output directory).
    pub fn outputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
        for p in paths {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
            self.outputs.push(FileDigest { path: name, sha256: sha256_file(p)? });
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::json("run manifest"))? + "\n";
        fs::write(path, text).map_err(Error::io(path))
    }
}
