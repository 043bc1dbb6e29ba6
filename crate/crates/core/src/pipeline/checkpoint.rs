//! Training checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! manifest.json        format version, config snapshot, progress, history
//! params/<name>.bin    one little-endian blob per parameter tensor
//! adam_m/<name>.bin    optimizer first moments
//! adam_v/<name>.bin    optimizer second moments
//! ```
//!
//! Directories are written under a temporary name and renamed into place.
//! Sampling state needs no saving: shuffles, masks and dropout are drawn
//! from generators keyed by (seed, epoch, sample).

use super::config::{ExperimentConfig, Phase, Regime};
use super::io::{read_file, read_text, write_file};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::real::Real;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

/// Per-epoch record of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Largest isotonicity violation on the probe batch after each epoch.
    pub max_violation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub phase: Phase,
    pub regime: Option<Regime>,
    pub dtype: String,
    pub config: ExperimentConfig,
    pub epochs_done: usize,
    pub step: u64,
    pub history: History,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: AdamWConfig,
    pub optimizer_steps: BTreeMap<String, u64>,
}

/// Everything needed to continue or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub manifest: Manifest,
    pub params: ParamStore<F>,
    pub optimizer: AdamW<F>,
}

fn blob_name(name: &str) -> String {
    format!("{name}.bin")
}

fn encode<F: Real>(t: &Array2<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * std::mem::size_of::<F>());
    for &x in t.iter() {
        x.write_le(&mut out);
    }
    out
}

fn decode<F: Real>(bytes: &[u8], shape: [usize; 2], path: &Path) -> Result<Array2<F>> {
    let w = std::mem::size_of::<F>();
    if bytes.len() != shape[0] * shape[1] * w {
        return Err(Error::Data(format!(
            "{}: {} bytes for a {}x{} tensor",
            path.display(),
            bytes.len(),
            shape[0],
            shape[1]
        )));
    }
    let values = bytes.chunks_exact(w).map(F::read_le).collect();
    Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| Error::Data(e.to_string()))
}

fn write_store<F: Real>(dir: &Path, store: &ParamStore<F>) -> Result<()> {
    for (name, t) in store.iter() {
        write_file(&dir.join(blob_name(name)), &encode(t))?;
    }
    Ok(())
}

fn read_store<F: Real>(dir: &Path, entries: &[TensorEntry], required: bool) -> Result<ParamStore<F>> {
    let mut store = ParamStore::new();
    for e in entries {
        let path = dir.join(blob_name(&e.name));
        if !required && !path.exists() {
            continue;
        }
        store.insert(e.name.clone(), decode(&read_file(&path)?, e.shape, &path)?);
    }
    Ok(store)
}

impl<F: Real> Checkpoint<F> {
    /// Fills the manifest fields derived from the tensors, as `save` writes them.
    pub fn sync_manifest(&mut self) {
        let mut m = self.manifest.clone();
        self.sync_into(&mut m);
        self.manifest = m;
    }

    fn sync_into(&self, manifest: &mut Manifest) {
        manifest.format_version = FORMAT_VERSION;
        manifest.dtype = F::DTYPE.to_string();
        manifest.tensors = self
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect();
        manifest.optimizer = self.optimizer.cfg;
        manifest.optimizer_steps = self.optimizer.steps.clone();
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let mut manifest = self.manifest.clone();
        self.sync_into(&mut manifest);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_file(&tmp.join("manifest.json"), &json)?;
        write_store(&tmp.join("params"), &self.params)?;
        write_store(&tmp.join("adam_m"), &self.optimizer.m)?;
        write_store(&tmp.join("adam_v"), &self.optimizer.v)?;

        let old = sibling(dir, "old");
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: Manifest =
            serde_json::from_str(&read_text(&mpath)?).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: format version {} is not supported",
                mpath.display(),
                manifest.format_version
            )));
        }
        if manifest.dtype != F::DTYPE {
            return Err(Error::Data(format!(
                "{}: stored as {}, requested {}",
                mpath.display(),
                manifest.dtype,
                F::DTYPE
            )));
        }
        let params = read_store(&dir.join("params"), &manifest.tensors, true)?;
        let mut optimizer = AdamW::new(manifest.optimizer);
        optimizer.m = read_store(&dir.join("adam_m"), &manifest.tensors, false)?;
        optimizer.v = read_store(&dir.join("adam_v"), &manifest.tensors, false)?;
        optimizer.steps = manifest.optimizer_steps.clone();
        Ok(Checkpoint {
            manifest,
            params,
            optimizer,
        })
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

/// Directory of the checkpoint written after `epoch` (1-based).
pub fn epoch_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch-{epoch:03}"))
}

/// Directory of the final checkpoint of a run.
pub fn final_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("final")
}
