use std::path::{Path, PathBuf};
use std::time::Instant;

use epimask::io::atomic_write;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Seconds. The only field that differs between reruns.
    pub wall_time: f64,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record(path: &Path) -> Result<FileRecord, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(FileRecord { path: path.display().to_string(), sha256: digest(&bytes) })
}

/// Collects outputs of a command and writes `manifest.json` next to them.
pub struct Run {
    command: String,
    config: RunConfig,
    seed: u64,
    out: PathBuf,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    start: Instant,
}

impl Run {
    pub fn start(command: &str, config: &RunConfig, seed: u64, out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
        Ok(Self {
            command: command.into(),
            config: config.clone(),
            seed,
            out: out.to_path_buf(),
            inputs: vec![],
            outputs: vec![],
            start: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(record(path)?);
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Atomically write `name` in the output directory and record it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        atomic_write(&p, bytes)?;
        self.outputs.push(FileRecord { path: p.display().to_string(), sha256: digest(bytes) });
        Ok(p)
    }

    /// Record a file some library call already wrote.
    pub fn written(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        self.outputs.push(record(&p)?);
        Ok(p)
    }

    pub fn finish(self) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        let bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        atomic_write(&self.out.join("manifest.json"), &bytes)?;
        Ok(m)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
