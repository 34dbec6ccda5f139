//! Run manifests: every artifact gets a sibling `<name>.manifest.json`
//! recording the command, its fully resolved configuration, the seed, and
//! digests of all inputs — enough to reproduce the run bit for bit.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Format version of manifests and CSV/JSON artifacts.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            artifact_version: ARTIFACT_VERSION,
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
        }
    }

    /// Records an input file by path and content digest.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(path)?,
        });
        Ok(())
    }

    /// Sibling manifest path for an artifact: `<file>.manifest.json`.
    pub fn manifest_path(artifact: &Path) -> PathBuf {
        let mut name = artifact
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    /// Writes the manifest next to `artifact`, atomically.
    pub fn write_beside(&self, artifact: &Path) -> Result<()> {
        let target = Self::manifest_path(artifact);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Json {
            path: target.clone(),
            message: e.to_string(),
        })?;
        text.push('\n');
        crate::io::write_atomic(&target, text.as_bytes())
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let io_err = |source: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(path).map_err(io_err)?;
    let mut hasher = Sha256::new();
    let mut buffer = [0u8; 8192];
    loop {
        let read = file.read(&mut buffer).map_err(io_err)?;
        if read == 0 {
            break;
        }
        hasher.update(&buffer[..read]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
