use std::fs;
use std::path::{Path, PathBuf};

use saconv::data::write_atomic;
use saconv::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Serialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Incomplete,
    Complete,
}

/// Provenance of one output directory. Written as `incomplete` before any
/// artifact and rewritten as `complete` once all of them are in place.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    pub config_hash: String,
    pub master_seed: u64,
    pub inputs: Vec<FileRecord>,
    pub artifacts: Vec<FileRecord>,
    pub started_at: String,
    pub finished_at: Option<String>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn start(dir: &Path, command: &str, config_text: &str, master_seed: u64, inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileRecord {
                    path: p.clone(),
                    sha256: file_digest(p)?,
                })
            })
            .collect::<Result<_>>()?;
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let m = RunManifest {
            command: command.to_string(),
            status: Status::Incomplete,
            config_hash: sha256_hex(config_text.as_bytes()),
            master_seed,
            inputs,
            artifacts: Vec::new(),
            started_at: now(),
            finished_at: None,
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    /// Writes `bytes` into the run directory and records its digest.
    pub fn artifact(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.artifacts.push(FileRecord {
            path: PathBuf::from(name),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn finish(mut self) -> Result<()> {
        self.status = Status::Complete;
        self.finished_at = Some(now());
        self.write()
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }
}
