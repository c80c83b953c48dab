//! Run manifests: what ran, with which resolved configuration, and the
//! SHA-256 of every file it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl Artifact {
    /// Hashes `path`; `label` is what the manifest records as the path.
    pub fn of(path: &Path, label: impl Into<String>) -> Result<Self> {
        let bytes = fs::metadata(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
            .len();
        Ok(Self {
            path: label.into(),
            bytes,
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let ctx = || format!("hashing {}", path.display());
    let mut f = fs::File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(ctx(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

/// One manifest per run. `wall_time_s`, the stage times and `timings` are
/// the only fields expected to differ between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<Artifact>,
    pub stages: Vec<StageRecord>,
    /// Named durations in seconds, e.g. per-volume inference time.
    pub timings: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(subcommand: impl Into<String>, seed: u64, config: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.into(),
            seed,
            threads: rayon::current_num_threads(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            stages: Vec::new(),
            timings: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn add_output(&mut self, path: &Path, label: impl Into<String>) -> Result<()> {
        self.outputs.push(Artifact::of(path, label)?);
        Ok(())
    }

    /// Copy with every timing field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.wall_time_s = 0.0;
        m.timings.values_mut().for_each(|t| *t = 0.0);
        m.stages.iter_mut().for_each(|s| s.wall_time_s = 0.0);
        m
    }

    /// Re-hashes every recorded output, resolving labels against `root`.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for a in &self.outputs {
            let actual = sha256_file(&root.join(&a.path))?;
            if actual != a.sha256 {
                return Err(Error::State("artifact checksum does not match the manifest"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        crate::io_util::write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}
