//! Checkpoint archive: magic, a little-endian `u64` length, a JSON metadata
//! block, then every parameter and optimizer array as raw `f32le` in the
//! order listed in the metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgeScaler, ModelConfig, TriameseModel, TriameseParams};
use crate::numerics::Tensor;
use crate::training::{OptimizerState, TrainConfig};

const MAGIC: &[u8; 8] = b"TRIAMESE";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    format: u32,
    model: ModelConfig,
    train: TrainConfig,
    /// Tokens per view, `N + 1`.
    tokens_per_view: [usize; 3],
    seed: u64,
    epoch: usize,
    best_val_mae: Option<f64>,
    scaler: AgeScaler,
    view_val_mae: Option<[f64; 3]>,
    optimizer_step: u64,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TriameseModel<f32>,
    pub optimizer: OptimizerState,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            arrays.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
            });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        };
        self.model.params.visit(&mut |name, t| push(name.to_string(), t));
        self.optimizer.first.visit(&mut |name, t| push(format!("adam.m.{name}"), t));
        self.optimizer.second.visit(&mut |name, t| push(format!("adam.v.{name}"), t));

        let meta = Metadata {
            format: FORMAT_VERSION,
            model: self.model.config.clone(),
            train: self.train.clone(),
            tokens_per_view: self.model.config.grids().map(|g| g.num_tokens()),
            seed: self.train.seed,
            epoch: self.epoch,
            best_val_mae: self.best_val_mae,
            scaler: self.model.scaler,
            view_val_mae: self.model.view_val_mae,
            optimizer_step: self.optimizer.step,
            arrays,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::load(origin, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)".into()));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("metadata block truncated".into()))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.format != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", meta.format)));
        }
        meta.model.validate()?;

        let mut payload = &bytes[json_end..];
        let mut loaded = Vec::with_capacity(meta.arrays.len());
        for entry in &meta.arrays {
            let numel: usize = entry.shape.iter().product();
            if payload.len() < 4 * numel {
                return Err(bad(format!("array `{}` truncated", entry.name)));
            }
            let data = payload[..4 * numel]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            payload = &payload[4 * numel..];
            loaded.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes after arrays", payload.len())));
        }

        // The config determines every expected name and shape.
        let template = TriameseModel::<f32>::init(meta.model.clone(), 0)?;
        let mut arrays = loaded.into_iter();
        let mut take = |expected: &str, like: &Tensor<f32>| -> Result<Tensor<f32>> {
            let (name, t) = arrays
                .next()
                .ok_or_else(|| bad(format!("missing array `{expected}`")))?;
            if name != expected || t.shape() != like.shape() {
                return Err(bad(format!(
                    "array `{name}` {:?} does not match expected `{expected}` {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        let params = try_map(&template.params, "", &mut take)?;
        let first = try_map(&template.params, "adam.m.", &mut take)?;
        let second = try_map(&template.params, "adam.v.", &mut take)?;
        if arrays.next().is_some() {
            return Err(bad("unexpected extra arrays".into()));
        }

        let model = TriameseModel {
            config: meta.model,
            params,
            scaler: meta.scaler,
            view_val_mae: meta.view_val_mae,
        };
        Ok(Self {
            model,
            optimizer: OptimizerState {
                first,
                second,
                step: meta.optimizer_step,
            },
            train: meta.train,
            epoch: meta.epoch,
            best_val_mae: meta.best_val_mae,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}

fn try_map(
    template: &TriameseParams<Tensor<f32>>,
    prefix: &str,
    take: &mut dyn FnMut(&str, &Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<TriameseParams<Tensor<f32>>> {
    let mut first_err = None;
    let mapped = template.map(&mut |name, like| {
        if first_err.is_some() {
            return like.clone();
        }
        match take(&format!("{prefix}{name}"), like) {
            Ok(t) => t,
            Err(e) => {
                first_err = Some(e);
                like.clone()
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(mapped),
    }
}
