//! `manifest.json`: written atomically when a run starts and rewritten when
//! it ends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use geopretrain_core::checkpoint::{file_checksum, save_bytes_atomic, Checkpoint};
use serde::{Deserialize, Serialize};

use crate::config::Seeds;
use crate::{Failure, Outcome};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: PathBuf,
    pub sha256: String,
    pub method: String,
    pub dataset: String,
    pub backbone: String,
    pub parent_checksum: Option<String>,
}

impl Provenance {
    pub fn of(path: &Path, ckpt: &Checkpoint) -> Outcome<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_checksum(path)?,
            method: ckpt.meta.method.as_str().into(),
            dataset: ckpt.meta.dataset.clone(),
            backbone: ckpt.meta.backbone.clone(),
            parent_checksum: ckpt.meta.parent_checksum.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub version: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub status: Status,
    /// Resolved configuration, TOML.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input checkpoints, each with its parent checksum.
    pub provenance: Vec<Provenance>,
    pub environment: Environment,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub wall_clock_secs: Option<f64>,
    /// Artifact name to file name inside the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A run in progress.
pub struct Run {
    pub out: PathBuf,
    pub manifest: Manifest,
    started: Instant,
}

impl Run {
    pub fn start(out: &Path, command: &str, config: String, seeds: Option<Seeds>, provenance: Vec<Provenance>) -> Outcome<Self> {
        std::fs::create_dir_all(out)?;
        let seeds = seeds
            .map(|s| {
                BTreeMap::from([
                    ("root".to_string(), s.root),
                    ("model".to_string(), s.model),
                    ("train".to_string(), s.train),
                    ("data".to_string(), s.data),
                ])
            })
            .unwrap_or_default();
        let run = Self {
            out: out.to_path_buf(),
            manifest: Manifest {
                format_version: crate::config::FORMAT_VERSION,
                command: command.into(),
                status: Status::Running,
                config,
                seeds,
                provenance,
                environment: Environment::current(),
                started_unix: now(),
                finished_unix: None,
                wall_clock_secs: None,
                artifacts: BTreeMap::new(),
                warnings: Vec::new(),
                error: None,
            },
            started: Instant::now(),
        };
        run.save()?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `bytes` atomically and records the file as an artifact.
    pub fn write(&mut self, key: &str, name: &str, bytes: &[u8]) -> Outcome {
        save_bytes_atomic(&self.path(name), bytes)?;
        self.manifest.artifacts.insert(key.into(), name.into());
        Ok(())
    }

    pub fn save_checkpoint(&mut self, key: &str, name: &str, ckpt: &Checkpoint) -> Outcome<String> {
        let sum = ckpt.save(&self.path(name))?;
        self.manifest.artifacts.insert(key.into(), name.into());
        Ok(sum)
    }

    fn save(&self) -> Outcome {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(Failure::runtime)?;
        save_bytes_atomic(&self.out.join(MANIFEST), text.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self, result: &Outcome) -> Outcome {
        self.manifest.finished_unix = Some(now());
        self.manifest.wall_clock_secs = Some(self.started.elapsed().as_secs_f64());
        match result {
            Ok(()) => {
                if let Some(missing) = self.manifest.artifacts.values().find(|f| !self.out.join(f).exists()) {
                    self.manifest.status = Status::Failed;
                    self.manifest.error = Some(format!("artifact {missing} was not written"));
                } else {
                    self.manifest.status = Status::Complete;
                }
            }
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(e.to_string());
            }
        }
        self.save()
    }
}

/// The manifest of an earlier run in `out`, if any.
pub fn previous(out: &Path) -> Option<Manifest> {
    let text = std::fs::read_to_string(out.join(MANIFEST)).ok()?;
    serde_json::from_str(&text).ok()
}
