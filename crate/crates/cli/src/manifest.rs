//! Run manifests and the output directory they describe.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use act_core::io::write_atomic;
use act_core::meta::Seeds;
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::{CliError, Command};

pub const MANIFEST_FORMAT: &str = "act-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(FileRecord { path: path.to_path_buf(), sha256: sha256_hex(&bytes) })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Interrupted,
    Failed,
    VerificationFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub command: Command,
    /// Resolved config; `None` for commands without one.
    pub config_toml: Option<String>,
    pub config_hash: Option<String>,
    pub seeds: Option<Seeds>,
    pub workers: usize,
    pub inputs: Vec<FileRecord>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileRecord>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: RunStatus,
    /// Command-specific summary values.
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad manifest {}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Config(format!("{}: unknown manifest format {:?}", path.display(), m.format)));
        }
        Ok(m)
    }
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// An output directory that records what is written into it.
pub struct OutDir {
    pub dir: PathBuf,
    files: Vec<FileRecord>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutDir { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(name), bytes)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", self.path(name).display())))?;
        let record = FileRecord { path: PathBuf::from(name), sha256: sha256_hex(bytes) };
        match self.files.iter_mut().find(|f| f.path == record.path) {
            Some(f) => *f = record,
            None => self.files.push(record),
        }
        Ok(())
    }

    pub fn files(&self) -> Vec<FileRecord> {
        let mut f = self.files.clone();
        f.sort_by(|a, b| a.path.cmp(&b.path));
        f
    }
}
