//! Run directory layout, content hashes and per-stage manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use neurodecode_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// A run directory and the config it was produced with.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let dir = cfg.out.clone();
        Self { cfg, dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.dir.join("manifests").join(format!("{stage}.json"))
    }
}

/// Bookkeeping for one stage: declared inputs, written outputs and timing.
pub struct StageLog<'a> {
    run: &'a Run,
    stage: &'static str,
    inputs: Vec<String>,
    outputs: Vec<String>,
    start: Instant,
}

impl<'a> StageLog<'a> {
    pub fn start(run: &'a Run, stage: &'static str) -> CliResult<Self> {
        fs::create_dir_all(&run.dir).map_err(Error::from)?;
        Ok(Self { run, stage, inputs: Vec::new(), outputs: Vec::new(), start: Instant::now() })
    }

    /// Declares an upstream artifact, failing with the producing command when
    /// it does not exist.
    pub fn input(&mut self, rel: &str, producer: &'static str) -> CliResult<PathBuf> {
        let p = self.run.path(rel);
        if !p.is_file() {
            return Err(CliError::Missing { path: p.display().to_string(), producer });
        }
        if !self.inputs.iter().any(|r| r == rel) {
            self.inputs.push(rel.to_string());
        }
        Ok(p)
    }

    /// Declares both files of a checkpoint written by `save_checkpoint`.
    pub fn checkpoint_input(&mut self, rel: &str, producer: &'static str) -> CliResult<PathBuf> {
        self.input(&format!("{rel}.json"), producer)?;
        self.input(&format!("{rel}.ndta"), producer)?;
        Ok(self.run.path(rel))
    }

    /// Path of an output artifact, with its directory created.
    pub fn output(&mut self, rel: &str) -> CliResult<PathBuf> {
        let p = self.run.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(Error::from)?;
        }
        if !self.outputs.iter().any(|r| r == rel) {
            self.outputs.push(rel.to_string());
        }
        Ok(p)
    }

    pub fn checkpoint_output(&mut self, rel: &str) -> CliResult<PathBuf> {
        self.output(&format!("{rel}.json"))?;
        self.output(&format!("{rel}.ndta"))?;
        Ok(self.run.path(rel))
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.output(rel)?;
        fs::write(p, contents).map_err(Error::from)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        self.write(rel, text + "\n")
    }

    /// Hashes every declared artifact and writes the stage manifest.
    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.write("config.json", self.run.cfg.to_json() + "\n")?;
        let hash = |rels: &[String]| -> CliResult<Vec<ArtifactHash>> {
            rels.iter().map(|r| Ok(ArtifactHash { path: r.clone(), sha256: sha256_file(&self.run.path(r))? })).collect()
        };
        let manifest = RunManifest {
            stage: self.stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config: self.run.cfg.clone(),
            inputs: hash(&self.inputs)?,
            outputs: hash(&self.outputs)?,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        let path = self.run.manifest_path(self.stage);
        fs::create_dir_all(path.parent().expect("manifest dir")).map_err(Error::from)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(Error::from)?;
        Ok(manifest)
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
