//! Run manifests: the resolved configuration plus SHA-256 hashes of every
//! artifact, in the same `key = value` format as config files.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::render_pairs;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.cfg";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub command: String,
    pub settings: Vec<(String, String)>,
    pub results: Vec<(String, String)>,
    pub artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, settings: Vec<(String, String)>) -> Self {
        Manifest {
            command: command.to_string(),
            settings,
            ..Self::default()
        }
    }

    pub fn result(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.results.push((format!("result.{key}"), value.to_string()));
        self
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.artifacts.push(path.into());
        self
    }

    pub fn render(&self) -> Result<String> {
        let mut text = format!("# amad {} run manifest\n", self.command);
        text.push_str(&render_pairs(&self.settings));
        text.push_str(&render_pairs(&self.results));
        for a in &self.artifacts {
            let name = a
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| a.display().to_string());
            text.push_str(&format!("artifact.{name}.sha256 = {}\n", sha256_file(a)?));
        }
        Ok(text)
    }

    /// Writes `manifest.cfg` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
