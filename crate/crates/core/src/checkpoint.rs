//! Directory checkpoint format shared by every trainable component:
//! one raw little-endian `f32` file per named tensor plus `manifest.json`
//! listing names, shapes, dtypes, the producing config and its hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, Error, Result};
use crate::motion::{read_f32, read_f64, read_json, write_f32, write_f64, write_json};
use crate::nn::{Mat, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config_hash: String,
    pub config: Value,
    #[serde(default)]
    pub metrics: Value,
    pub tensors: Vec<TensorEntry>,
}

/// Tensors plus metadata, as held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub config_hash: String,
    pub metrics: Value,
    pub tensors: Vec<(String, Mat)>,
    /// Store tensors as `f64` instead of `f32`.
    pub full_precision: bool,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: Value, metrics: Value, stores: &[(&str, &ParamStore)]) -> Self {
        let config_hash = crate::config::hash_json(&config);
        let mut tensors = Vec::new();
        for (prefix, store) in stores {
            for (name, m) in store.named() {
                let full = if prefix.is_empty() {
                    name.to_string()
                } else {
                    format!("{prefix}/{name}")
                };
                tensors.push((full, m.clone()));
            }
        }
        Self {
            kind: kind.to_string(),
            config,
            config_hash,
            metrics,
            tensors,
            full_precision: false,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Loads the tensors under `prefix` into `store`.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        store.load_named(|name| {
            let full = if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}/{name}")
            };
            self.tensor(&full)
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let dtype = if self.full_precision { "f64" } else { "f32" };
        for (name, m) in &self.tensors {
            let file = format!("{}.{dtype}", name.replace('/', "__"));
            if self.full_precision {
                write_f64(&dir.join(&file), m.data())?;
            } else {
                write_f32(&dir.join(&file), m.data())?;
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                dtype: dtype.into(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut full_precision = false;
        for e in &manifest.tensors {
            let n = e.shape[0] * e.shape[1];
            let data = match e.dtype.as_str() {
                "f32" => read_f32(&dir.join(&e.file), n)?,
                "f64" => {
                    full_precision = true;
                    read_f64(&dir.join(&e.file), n)?
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{}' has unsupported dtype {other}",
                        e.name
                    )))
                }
            };
            tensors.push((e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data)));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            config_hash: manifest.config_hash,
            metrics: manifest.metrics,
            tensors,
            full_precision,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Outcome of a training loop that hit a non-finite loss: the model as it
/// was at the last finite step.
#[derive(Debug)]
pub struct Diverged<M> {
    pub step: usize,
    pub detail: String,
    pub last_good: M,
}

#[derive(Debug)]
pub enum TrainError<M> {
    Failed(Error),
    Diverged(Diverged<M>),
}

impl<M> From<Error> for TrainError<M> {
    fn from(e: Error) -> Self {
        TrainError::Failed(e)
    }
}

impl<M> From<TrainError<M>> for Error {
    fn from(e: TrainError<M>) -> Self {
        match e {
            TrainError::Failed(e) => e,
            TrainError::Diverged(d) => Error::Diverged {
                step: d.step,
                detail: d.detail,
            },
        }
    }
}

pub type TrainResult<M> = std::result::Result<M, TrainError<M>>;
