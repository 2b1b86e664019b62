//! Run configurations. Each command reads an optional JSON file into one of
//! these, applies command-line overrides, and persists the result next to
//! its outputs as `resolved_config.json`.

use std::path::{Path, PathBuf};

use dualflood::checkpoint::CHECKPOINT_VERSION;
use dualflood::container::DATASET_VERSION;
use dualflood::dataset::FeatureConfig;
use dualflood::eval::{DEFAULT_THRESHOLDS, REPORT_VERSION};
use dualflood::model::{EdgeUpdate, Neighborhood};
use dualflood::synthetic::{CatchmentSpec, HydrographSpec};
use dualflood::train::TrainConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_EVENTS: usize = 56;

pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub dataset: String,
    pub checkpoint: String,
    pub report: String,
    pub tool: String,
}

impl Default for FormatVersions {
    fn default() -> Self {
        Self {
            dataset: DATASET_VERSION.into(),
            checkpoint: CHECKPOINT_VERSION.into(),
            report: REPORT_VERSION.into(),
            tool: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub events: usize,
    /// Seed for the per-event forcing perturbations.
    pub seed: u64,
    pub catchment: CatchmentSpec,
    pub hydrograph: HydrographSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            events: DEFAULT_EVENTS,
            seed: 0,
            catchment: CatchmentSpec::default(),
            hydrograph: HydrographSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub latent_dim: usize,
    pub gnn_layers: usize,
    pub mlp_layers: usize,
    pub edge_update: EdgeUpdate,
    pub neighborhood: Neighborhood,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            gnn_layers: 4,
            mlp_layers: 2,
            edge_update: EdgeUpdate::default(),
            neighborhood: Neighborhood::default(),
            seed: 0,
        }
    }
}

/// Event-level split. Without folds, events are shuffled and cut into
/// train/val/test in the `40:8:8` proportions; with `folds = K`, fold `k`
/// tests on block `k`, validates on block `k+1` and trains on the rest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub folds: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 40,
            val: 8,
            test: 8,
            folds: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: &str, total: usize) -> Result<Vec<usize>, CliError> {
        match name {
            "train" => Ok(self.train.clone()),
            "val" => Ok(self.val.clone()),
            "test" => Ok(self.test.clone()),
            "all" => Ok((0..total).collect()),
            other => Err(CliError::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(CliError::Config("split proportions must be positive".into()));
        }
        if self.folds.is_some_and(|k| k < 3) {
            return Err(CliError::Config("--folds needs at least 3 folds".into()));
        }
        Ok(())
    }

    fn order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        idx
    }

    /// Single split of `n` events. Datasets with fewer than three events
    /// reuse every event in every role.
    pub fn split(&self, n: usize) -> Split {
        if n < 3 {
            let all: Vec<usize> = (0..n).collect();
            return Split {
                train: all.clone(),
                val: all.clone(),
                test: all,
            };
        }
        let total = (self.train + self.val + self.test) as f64;
        let share = |k: usize| ((n as f64 * k as f64 / total).round() as usize).max(1);
        let test = share(self.test).min(n - 2);
        let val = share(self.val).min(n - 1 - test);
        let idx = self.order(n);
        let mut s = Split {
            test: idx[..test].to_vec(),
            val: idx[test..test + val].to_vec(),
            train: idx[test + val..].to_vec(),
        };
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
        s
    }

    /// Fold `k` of `folds`.
    pub fn fold(&self, n: usize, folds: usize, k: usize) -> Result<Split, CliError> {
        if n < folds {
            return Err(CliError::Config(format!("{folds} folds need at least {folds} events, have {n}")));
        }
        let idx = self.order(n);
        let block = |b: usize| -> Vec<usize> {
            let mut v: Vec<usize> = idx[b * n / folds..(b + 1) * n / folds].to_vec();
            v.sort_unstable();
            v
        };
        let (test, val) = (block(k), block((k + 1) % folds));
        let mut train: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|i| !test.contains(i) && !val.contains(i))
            .collect();
        train.sort_unstable();
        Ok(Split { train, val, test })
    }
}

/// `both` keeps the configured λ3/λ4; the others zero the inactive terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsArg {
    Both,
    Global,
    Local,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindArg {
    #[default]
    Dualflood,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub model_kind: ModelKindArg,
    pub model: ModelSettings,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    /// Physics preset applied on top of `train.weights`.
    pub physics: PhysicsArg,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKindArg::default(),
            model: ModelSettings::default(),
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            physics: PhysicsArg::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: String,
    /// Predicted steps per event; `None` runs to the end of each event.
    pub horizon: Option<usize>,
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            horizon: None,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

/// What every command persists as `resolved_config.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Resolved<T> {
    pub command: String,
    pub formats: FormatVersions,
    pub inputs: Vec<PathBuf>,
    pub config: T,
}
