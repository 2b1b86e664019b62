//! Self-describing model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (model config,
//! normalization statistics, input schema, parameter names and shapes, and
//! optionally the resumable training state) plus little-endian f32 blobs
//! for the weights and Adam moments. Weights are kept f32-representable in
//! memory, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::{read_f32, write_f32};
use crate::dataset::{FeatureConfig, NormStats};
use crate::error::{FloodError, Result};
use crate::model::{ModelConfig, ModelState};
use crate::train::{AdamState, CurriculumState, EpochRecord, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "dualflood-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";
const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";
const ADAM_M_FILE: &str = "adam_m.bin";
const ADAM_V_FILE: &str = "adam_v.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// A trained (or freshly initialized) network.
    Dualflood,
    /// Ground-truth replay; used to exercise the evaluation pipeline.
    Oracle,
}

/// Resumable optimizer and curriculum state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    pub config: TrainConfig,
    pub curriculum: CurriculumState,
    pub optimizer: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub features: FeatureConfig,
    pub model: Option<ModelState>,
    pub stats: Option<NormStats>,
    pub training: Option<TrainingSnapshot>,
}

impl Checkpoint {
    pub fn trained(model: ModelState, stats: NormStats, training: Option<TrainingSnapshot>) -> Self {
        Self {
            kind: ModelKind::Dualflood,
            features: model.config.features,
            model: Some(model),
            stats: Some(stats),
            training,
        }
    }

    pub fn oracle(features: FeatureConfig) -> Self {
        Self {
            kind: ModelKind::Oracle,
            features,
            model: None,
            stats: None,
            training: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct TrainingManifest {
    config: TrainConfig,
    curriculum: CurriculumState,
    optimizer_step: u64,
    epoch: usize,
    history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: String,
    model_kind: ModelKind,
    features: FeatureConfig,
    model_config: Option<ModelConfig>,
    norm_stats: Option<NormStats>,
    params: Vec<ParamEntry>,
    training: Option<TrainingManifest>,
}

fn flat(arrays: &[Array2<f64>]) -> impl Iterator<Item = f32> + '_ {
    arrays.iter().flat_map(|a| a.iter().map(|v| *v as f32))
}

/// Writes `ckpt` to `dir`, replacing any previous checkpoint there. The
/// new contents are staged next to `dir` and swapped in with a rename.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.kind == ModelKind::Dualflood && (ckpt.model.is_none() || ckpt.stats.is_none()) {
        return Err(FloodError::InvalidInput(
            "a dualflood checkpoint needs weights and normalization statistics".into(),
        ));
    }
    let name = dir
        .file_name()
        .ok_or_else(|| FloodError::InvalidInput(format!("bad checkpoint path {}", dir.display())))?;
    let staging = dir.with_file_name(format!("{}.partial", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| FloodError::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| FloodError::io(&staging, e))?;

    let params = ckpt
        .model
        .as_ref()
        .map(|m| {
            m.param_names()
                .iter()
                .zip(m.weights())
                .map(|(n, w)| ParamEntry {
                    name: n.clone(),
                    shape: [w.nrows(), w.ncols()],
                })
                .collect()
        })
        .unwrap_or_default();
    if let Some(m) = &ckpt.model {
        write_f32(&staging.join(WEIGHTS_FILE), flat(m.weights()))?;
    }
    if let Some(t) = &ckpt.training {
        write_f32(&staging.join(ADAM_M_FILE), flat(&t.optimizer.m))?;
        write_f32(&staging.join(ADAM_V_FILE), flat(&t.optimizer.v))?;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        format_version: CHECKPOINT_VERSION.into(),
        model_kind: ckpt.kind,
        features: ckpt.features,
        model_config: ckpt.model.as_ref().map(|m| m.config.clone()),
        norm_stats: ckpt.stats.clone(),
        params,
        training: ckpt.training.as_ref().map(|t| TrainingManifest {
            config: t.config.clone(),
            curriculum: t.curriculum.clone(),
            optimizer_step: t.optimizer.step,
            epoch: t.epoch,
            history: t.history.clone(),
        }),
    };
    let path = staging.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| FloodError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| FloodError::io(&path, e))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| FloodError::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| FloodError::io(dir, e))
}

fn read_arrays(path: &Path, shapes: &[[usize; 2]]) -> Result<Vec<Array2<f64>>> {
    let total = shapes.iter().map(|s| s[0] * s[1]).sum();
    let flat = read_f32(path, total)?;
    if let Some(v) = flat.iter().find(|v| !v.is_finite()) {
        return Err(FloodError::corrupt(path, format!("non-finite value {v}")));
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for s in shapes {
        let n = s[0] * s[1];
        let data = flat[at..at + n].iter().map(|v| f64::from(*v)).collect();
        out.push(Array2::from_shape_vec((s[0], s[1]), data).expect("length checked"));
        at += n;
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FloodError::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| FloodError::corrupt(&path, e.to_string()))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(FloodError::corrupt(&path, "not a dualflood checkpoint manifest"));
    }
    let version = value
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if version != CHECKPOINT_VERSION {
        return Err(FloodError::UnsupportedVersion {
            found: version.into(),
            expected: CHECKPOINT_VERSION.into(),
        });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| FloodError::corrupt(&path, e.to_string()))?;

    if m.model_kind == ModelKind::Oracle {
        return Ok(Checkpoint::oracle(m.features));
    }
    let (config, stats) = match (m.model_config, m.norm_stats) {
        (Some(c), Some(s)) => (c, s),
        _ => return Err(FloodError::corrupt(&path, "model config or normalization statistics missing")),
    };
    if config.features != m.features {
        return Err(FloodError::corrupt(&path, "feature schema disagrees with model config"));
    }
    let shapes: Vec<[usize; 2]> = m.params.iter().map(|p| p.shape).collect();
    let weights = read_arrays(&dir.join(WEIGHTS_FILE), &shapes)?;
    let model = ModelState::from_weights(config, weights).map_err(|e| FloodError::corrupt(&path, e.to_string()))?;
    if model.param_names().iter().zip(&m.params).any(|(a, b)| *a != b.name) {
        return Err(FloodError::corrupt(&path, "parameter names disagree with model config"));
    }
    let training = match m.training {
        None => None,
        Some(t) => Some(TrainingSnapshot {
            optimizer: AdamState {
                step: t.optimizer_step,
                m: read_arrays(&dir.join(ADAM_M_FILE), &shapes)?,
                v: read_arrays(&dir.join(ADAM_V_FILE), &shapes)?,
            },
            config: t.config,
            curriculum: t.curriculum,
            epoch: t.epoch,
            history: t.history,
        }),
    };
    Ok(Checkpoint {
        kind: ModelKind::Dualflood,
        features: m.features,
        model: Some(model),
        stats: Some(stats),
        training,
    })
}
