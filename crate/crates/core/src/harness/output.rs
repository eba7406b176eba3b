//! File emission for experiment runs.
//!
//! All files go through one [`OutputWriter`], which remembers what it wrote.
//! The manifest is written last and lists every other file with its size and
//! SHA-256, so a consumer that sees the manifest can trust the rest is
//! complete. Paths in the manifest are relative to the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "evimix-manifest/1";
/// Dialect of the echoed `config.toml`.
pub const CONFIG_DIALECT: &str = "toml-1.0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// A named pass/fail check made during an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_dialect: String,
    pub kind: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
}

pub struct OutputWriter {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputWriter {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root, files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Write `contents` to `rel` under the output root, creating parent
    /// directories as needed.
    pub fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: contents.len() as u64,
            sha256: format!("{:x}", Sha256::digest(contents.as_bytes())),
        });
        Ok(())
    }

    /// Write the manifest and return it.
    pub fn finish(self, kind: &str, seed: u64, assertions: Vec<Assertion>) -> Result<Manifest> {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            config_dialect: CONFIG_DIALECT.to_string(),
            kind: kind.to_string(),
            seed,
            passed: assertions.iter().all(|a| a.passed),
            files: self.files,
            assertions,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
