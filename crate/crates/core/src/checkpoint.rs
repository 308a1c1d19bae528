//! Model checkpoints: every parameter tensor keyed by module path, plus the
//! run config, normalization transform, and cached reference embeddings.
//! JSON with exact float round-tripping, so save -> load -> save is
//! byte-identical.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::model::{ModelConfig, ModelState, ParamView, ParamViewMut, ReferenceSet};
use crate::refine::RefinementParams;
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceEntry {
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    /// Per-node `(offset, scale)` of the training-time preprocessing.
    normalization: Vec<(f64, f64)>,
    phi_rescaled: bool,
    tensors: Vec<TensorEntry>,
    reference: Option<ReferenceEntry>,
}

/// Everything needed to forecast with a trained model on new files.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub train_config: TrainConfig,
    pub normalization: Vec<(f64, f64)>,
    pub phi_rescaled: bool,
}

/// Serializes a checkpoint to a JSON string (deterministic bytes).
pub fn to_string(ckpt: &Checkpoint) -> String {
    let mut tensors = Vec::new();
    ckpt.state.visit(&mut |path, view| {
        let (shape, data) = match view {
            ParamView::Vec(a) => (vec![a.len()], a.to_vec()),
            ParamView::Mat(a) => (vec![a.nrows(), a.ncols()], a.iter().copied().collect()),
        };
        tensors.push(TensorEntry {
            path: path.to_string(),
            shape,
            data,
        });
    });
    let reference = ckpt.state.reference.as_ref().map(|r| ReferenceEntry {
        means: r.means.iter().map(|m| m.to_vec()).collect(),
        stds: r.stds.iter().map(|s| s.to_vec()).collect(),
    });
    let file = CheckpointFile {
        schema_version: SCHEMA_VERSION,
        model_config: ckpt.state.config.clone(),
        train_config: ckpt.train_config.clone(),
        normalization: ckpt.normalization.clone(),
        phi_rescaled: ckpt.phi_rescaled,
        tensors,
        reference,
    };
    serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_string(ckpt)).map_err(|e| CheckpointError::Io(e.to_string()))
}

/// Parses a checkpoint from its JSON representation.
pub fn from_str(text: &str) -> Result<Checkpoint, CheckpointError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(CheckpointError::SchemaVersion(file.schema_version));
    }
    let config: ModelConfig = file.model_config;
    let mut state = ModelState::init(config.clone(), 0);
    state.refine = RefinementParams::init(config.n_nodes, config.c);

    let mut by_path: std::collections::BTreeMap<String, TensorEntry> = file
        .tensors
        .into_iter()
        .map(|t| (t.path.clone(), t))
        .collect();
    let mut missing = Vec::new();
    let mut mismatch = Vec::new();
    state.visit_mut(&mut |path, view| {
        let Some(entry) = by_path.remove(path) else {
            missing.push(path.to_string());
            return;
        };
        match view {
            ParamViewMut::Vec(a) => {
                if entry.shape != vec![a.len()] {
                    mismatch.push(path.to_string());
                    return;
                }
                *a = Array1::from_vec(entry.data);
            }
            ParamViewMut::Mat(a) => {
                if entry.shape != vec![a.nrows(), a.ncols()] {
                    mismatch.push(path.to_string());
                    return;
                }
                *a = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), entry.data)
                    .expect("shape was just validated");
            }
        }
    });
    if let Some(path) = missing.first() {
        return Err(CheckpointError::Invalid(format!("missing tensor {path}")));
    }
    if let Some(path) = mismatch.first() {
        return Err(CheckpointError::Invalid(format!(
            "tensor shape mismatch at {path}"
        )));
    }
    if let Some(extra) = by_path.keys().next() {
        return Err(CheckpointError::Invalid(format!("unknown tensor {extra}")));
    }
    state.reference = file.reference.map(|r| ReferenceSet {
        means: r.means.into_iter().map(Array1::from_vec).collect(),
        stds: r.stds.into_iter().map(Array1::from_vec).collect(),
    });
    Ok(Checkpoint {
        state,
        train_config: file.train_config,
        normalization: file.normalization,
        phi_rescaled: file.phi_rescaled,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io(e.to_string()))?;
    from_str(&text)
}
