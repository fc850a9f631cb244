use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};

/// Git-style content hash: a file hashes as `blob <len>\0<bytes>`, a
/// directory as `tree` over its sorted `name hash` entries.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    let meta = fs::metadata(path).map_err(|e| io_error(path, e))?;
    let mut h = Sha256::new();
    if meta.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_error(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| io_error(path, err)))
            .collect::<Result<_, _>>()?;
        names.sort();
        let mut body = String::new();
        for p in names {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            body.push_str(&format!("{name} {}\n", content_hash(&p)?));
        }
        h.update(format!("tree {}\0", body.len()));
        h.update(body);
    } else {
        let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
        h.update(format!("blob {}\0", bytes.len()));
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Serialize)]
pub struct HashedPath {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Timing {
    pub stage: String,
    pub wall_ms: u128,
}

#[derive(Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: &'static str,
    pub started_unix: u64,
    pub workers: usize,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub inputs: Vec<HashedPath>,
    pub outputs: Vec<HashedPath>,
    pub timings: Vec<Timing>,
    pub notes: Vec<String>,
}

/// Collects what a run read, wrote and how long each stage took.
pub struct Recorder {
    manifest: Manifest,
    clock: Instant,
}

impl Recorder {
    pub fn new(subcommand: &str, config: &RunConfig, workers: usize) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            manifest: Manifest {
                subcommand: subcommand.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                started_unix,
                workers,
                seed: config.seed,
                config: config.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: Vec::new(),
                notes: Vec::new(),
            },
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = content_hash(path)?;
        self.manifest.inputs.push(HashedPath {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = content_hash(path)?;
        self.manifest.outputs.push(HashedPath {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.manifest.notes.push(note.into());
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.manifest.timings.push(Timing {
            stage: stage.to_string(),
            wall_ms: t.elapsed().as_millis(),
        });
        out
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf, CliError> {
        self.manifest.timings.push(Timing {
            stage: "total".into(),
            wall_ms: self.clock.elapsed().as_millis(),
        });
        let path = out_dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}
