use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::diffmath::{msmt, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "model.json";

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Truncated normal at two standard deviations.
pub fn trunc_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64_lossy(v);
        }
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    config: ModelConfig,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

fn file_name(name: &str) -> String {
    format!("{name}.msmt")
}

/// Writes every tensor as an MSMT file plus a JSON manifest.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = file_name(name);
        msmt::save(t, &dir.join(&file))?;
        entries.push(CheckpointEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        config: cfg.clone(),
        params: entries,
    };
    msmt::write_atomic(&dir.join(CHECKPOINT_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

/// Reads a checkpoint into `expected`, whose names and shapes it must
/// match exactly. Returns the stored config.
pub fn load_checkpoint(dir: &Path, expected: &mut ParamStore<f32>) -> Result<ModelConfig> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if manifest.params.len() != expected.len() {
        return Err(Error::Format {
            path: mpath,
            msg: format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.params.len(),
                expected.len()
            ),
        });
    }
    for entry in &manifest.params {
        let path = dir.join(&entry.file);
        let t: Tensor<f32> = msmt::load(&path)?;
        let slot = expected.get_mut(&entry.name).ok_or_else(|| Error::Format {
            path: path.clone(),
            msg: format!("unknown parameter {}", entry.name),
        })?;
        if t.shape() != slot.shape() || t.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path,
                msg: format!(
                    "shape mismatch for {}: file {:?}, model {:?}",
                    entry.name,
                    t.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = t;
    }
    Ok(manifest.config)
}
