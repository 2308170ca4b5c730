//! Artifact writing with content hashes for the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into one directory and remembers their hashes.
pub struct ArtifactDir {
    pub path: PathBuf,
    pub hashes: BTreeMap<String, String>,
}

impl ArtifactDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(path)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            hashes: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path.join(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::config(format!("cannot write {}: {e}", p.display())))?;
        self.hashes.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::config)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file written through a nested directory under this one.
    pub fn adopt(&mut self, prefix: &str, other: &ArtifactDir) {
        for (name, h) in &other.hashes {
            self.hashes.insert(format!("{prefix}/{name}"), h.clone());
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: &'a str,
    pub seed: u64,
    pub status: &'a str,
    pub files: &'a BTreeMap<String, String>,
}

impl ArtifactDir {
    /// Writes `manifest.json` over every file written so far.
    pub fn finish(mut self, config_sha256: &str, seed: u64, status: &str) -> Result<ArtifactDir, CliError> {
        let files = self.hashes.clone();
        let manifest = Manifest {
            tool: "fedhtl",
            version: env!("CARGO_PKG_VERSION"),
            config_sha256,
            seed,
            status,
            files: &files,
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(self)
    }
}
