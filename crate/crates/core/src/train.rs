//! Autoregressive multi-step training with a validation-driven curriculum.
//!
//! Each training window starts at a ground-truth state `t` and unrolls the
//! model for `o` steps, feeding predicted volumes and flows back into the
//! next window while boundary forcing stays ground truth. The window loss
//! is the mean of the per-step objectives and gradients flow through the
//! whole chain.
//!
//! The horizon `o` starts at 1. After the validation loss at the current
//! horizon stops improving for `patience` epochs, `o` grows by `C` (capped
//! at `O`) and the learning rate is multiplied by `γ`. Convergence at `O`
//! ends training.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, TrainingSnapshot};
use crate::dataset::{EventSeries, NormStats};
use crate::error::{FloodError, Result};
use crate::graph::FloodGraph;
use crate::losses::{
    rollout_loss_on_tape, total_loss_on_tape, LossBreakdown, LossWeights, PhysicsConfig,
    StepForcing, StepLossVars, StepVars,
};
use crate::model::{check_stats, window_on_tape, History, ModelState, TapeModel};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Target rollout length `O`.
    pub target_horizon: usize,
    /// Curriculum increment `C`.
    pub curriculum_step: usize,
    /// Learning-rate decay `γ` applied at each stage advance.
    pub lr_decay: f64,
    pub learning_rate: f64,
    pub patience: usize,
    /// Relative improvement required to reset the patience counter.
    pub min_delta: f64,
    pub max_epochs_per_stage: usize,
    pub max_epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Cap on training windows per epoch, taken from the shuffled order.
    pub max_train_windows: Option<usize>,
    /// Cap on validation windows per event, evenly spaced.
    pub max_val_windows: Option<usize>,
    pub weights: LossWeights,
    pub physics: PhysicsConfig,
    pub adam: AdamConfig,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Zero the Adam moments at each stage advance.
    pub reset_moments: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_horizon: 8,
            curriculum_step: 1,
            lr_decay: 0.5,
            learning_rate: 3e-4,
            patience: 10,
            min_delta: 1e-4,
            max_epochs_per_stage: 100,
            max_epochs: 1000,
            batch_size: 8,
            max_train_windows: None,
            max_val_windows: Some(64),
            weights: LossWeights::default(),
            physics: PhysicsConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: None,
            reset_moments: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FloodError::Config(msg));
        if self.target_horizon == 0 {
            return bad("target_horizon must be at least 1".into());
        }
        if self.curriculum_step == 0 || self.curriculum_step > self.target_horizon {
            return bad(format!(
                "curriculum_step must lie in [1, {}], got {}",
                self.target_horizon, self.curriculum_step
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.max_epochs_per_stage == 0 {
            return bad("patience, batch_size and epoch caps must be positive".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad(format!("min_delta = {}", self.min_delta));
        }
        if self.max_train_windows == Some(0) || self.max_val_windows == Some(0) {
            return bad("window caps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip = {c}"));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam parameters {a:?}"));
        }
        let w = &self.weights;
        if [w.node, w.edge, w.global, w.local].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad(format!("loss weights must be non-negative: {w:?}"));
        }
        Ok(())
    }

    /// `lr0 · γ^stage`.
    pub fn stage_lr(&self, stage: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(stage as i32)
    }
}

/// Why a curriculum update changed stage or stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// Patience exhausted below `O`; horizon extended.
    Advance,
    /// Stage epoch cap hit below `O`; horizon extended.
    StageCap,
    /// Patience exhausted (or stage cap hit) at `O`; training ends.
    Converged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// Current horizon `o`.
    pub horizon: usize,
    pub stage: usize,
    /// Best validation loss seen in this stage.
    pub best_val: Option<f64>,
    pub epochs_since_improvement: usize,
    pub epochs_in_stage: usize,
    pub lr: f64,
    pub finished: bool,
}

impl CurriculumState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            horizon: 1.min(cfg.target_horizon),
            stage: 0,
            best_val: None,
            epochs_since_improvement: 0,
            epochs_in_stage: 0,
            lr: cfg.stage_lr(0),
            finished: false,
        }
    }
}

/// Folds one end-of-epoch validation loss into the curriculum.
pub fn curriculum_step(cur: &CurriculumState, val_loss: f64, cfg: &TrainConfig) -> (CurriculumState, Option<Transition>) {
    let mut next = cur.clone();
    if next.finished {
        return (next, None);
    }
    next.epochs_in_stage += 1;
    let improved = match cur.best_val {
        None => true,
        Some(best) => val_loss < best - cfg.min_delta * best.abs(),
    };
    if improved {
        next.best_val = Some(val_loss);
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
    }
    let exhausted = next.epochs_since_improvement >= cfg.patience;
    let capped = next.epochs_in_stage >= cfg.max_epochs_per_stage;
    if !(exhausted || capped) {
        return (next, None);
    }
    if next.horizon >= cfg.target_horizon {
        next.finished = true;
        return (next, Some(Transition::Converged));
    }
    next.horizon = (next.horizon + cfg.curriculum_step).min(cfg.target_horizon);
    next.stage += 1;
    next.lr = cfg.stage_lr(next.stage);
    next.best_val = None;
    next.epochs_since_improvement = 0;
    next.epochs_in_stage = 0;
    let why = if exhausted {
        Transition::Advance
    } else {
        Transition::StageCap
    };
    (next, Some(why))
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(weights: &[Array2<f64>]) -> Self {
        Self {
            step: 0,
            m: weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v: weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|a| a.fill(0.0));
    }

    /// One bias-corrected Adam update. Weights and moments are rounded to
    /// f32 afterwards so a float32 checkpoint captures the state exactly.
    pub fn update(&mut self, weights: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((w, g), (m, v)) in weights.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                let m1 = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                let v1 = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let step = lr * (m1 / c1) / ((v1 / c2).sqrt() + cfg.eps);
                *w = f64::from((*w - step) as f32);
                *m = f64::from(m1 as f32);
                *v = f64::from(v1 as f32);
            });
        }
    }
}

/// Everything a rollout needs besides the model.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a> {
    pub graph: &'a FloodGraph,
    pub stats: &'a NormStats,
    pub weights: &'a LossWeights,
    pub physics: PhysicsConfig,
}

/// Loss variables of one unrolled window.
#[derive(Clone, Debug)]
pub struct RolloutVars {
    pub loss: Var,
    pub steps: Vec<StepLossVars>,
}

/// Unrolls `model` for `horizon` steps from ground truth at `start`.
///
/// The prediction target at each step is the true next state measured from
/// the current predicted state, so the loss penalizes accumulated drift.
pub fn training_rollout(
    tape: &Tape,
    model: &TapeModel,
    ctx: RolloutContext<'_>,
    event: &EventSeries,
    start: usize,
    horizon: usize,
) -> Result<RolloutVars> {
    let p = model.features().history;
    if start < p {
        return Err(FloodError::InsufficientHistory { t: start, p });
    }
    if horizon == 0 || start + horizon >= event.num_steps() {
        return Err(FloodError::HorizonExceedsEvent {
            start,
            horizon,
            num_steps: event.num_steps(),
        });
    }
    let dv_stats = &ctx.stats.delta_volume;
    let dq_stats = &ctx.stats.delta_flow;
    let mut history = History::from_event(tape, event, start - p, start);
    let mut steps = Vec::with_capacity(horizon);
    for t in start..start + horizon {
        let (x, e) = window_on_tape(tape, ctx.graph, event, t, model.features(), ctx.stats, &history)?;
        let out = model.step(tape, ctx.graph, x, e, ctx.stats);
        let v_now = history.volume_at(t);
        let q_now = history.flow_at(t);
        let v_next = tape.add(v_now, out.delta_volume);
        let q_next = tape.add(q_now, out.delta_flow);

        let row = |m: &Array2<f32>, r: usize| m.row(r).iter().map(|v| f64::from(*v)).collect::<Vec<f64>>();
        let true_v = tape.column(&row(&event.node_volume, t + 1));
        let true_q = tape.column(&row(&event.edge_flow, t + 1));
        let target_dv = tape.affine(tape.sub(true_v, v_now), 1.0 / dv_stats.std[0], -dv_stats.mean[0] / dv_stats.std[0]);
        let target_dq = tape.affine(tape.sub(true_q, q_now), 1.0 / dq_stats.std[0], -dq_stats.mean[0] / dq_stats.std[0]);
        let forcing = StepForcing {
            rainfall: row(&event.rainfall, t),
            inflow: f64::from(event.inflow_bc[t]),
            outflow: f64::from(event.outflow_bc[t]),
            dt: event.dt,
        };
        let vars = StepVars {
            dv_norm: out.dv_norm,
            dq_norm: out.dq_norm,
            dv_phys: out.delta_volume,
            q_next,
        };
        steps.push(total_loss_on_tape(
            tape,
            ctx.graph,
            &vars,
            target_dv,
            target_dq,
            &forcing,
            ctx.weights,
            ctx.physics,
        ));
        history.push(v_next, q_next);
    }
    let totals: Vec<Var> = steps.iter().map(|s| s.total).collect();
    let loss = rollout_loss_on_tape(tape, &totals)?;
    Ok(RolloutVars { loss, steps })
}

/// Value and per-step breakdown of one window, without gradients.
pub fn rollout_loss_value(
    state: &ModelState,
    ctx: RolloutContext<'_>,
    event: &EventSeries,
    start: usize,
    horizon: usize,
) -> Result<(f64, Vec<LossBreakdown>)> {
    check_stats(state, ctx.stats)?;
    let tape = Tape::new();
    let model = state.on_tape_frozen(&tape);
    let out = training_rollout(&tape, &model, ctx, event, start, horizon)?;
    Ok((tape.scalar(out.loss), out.steps.iter().map(|s| s.values(&tape)).collect()))
}

/// Loss, per-step breakdown and weight gradients of one window.
pub fn rollout_gradients(
    state: &ModelState,
    ctx: RolloutContext<'_>,
    event: &EventSeries,
    start: usize,
    horizon: usize,
) -> Result<(f64, Vec<LossBreakdown>, Vec<Array2<f64>>)> {
    check_stats(state, ctx.stats)?;
    let tape = Tape::new();
    let model = state.on_tape(&tape);
    let out = training_rollout(&tape, &model, ctx, event, start, horizon)?;
    let grads = tape.backward(out.loss);
    Ok((
        tape.scalar(out.loss),
        out.steps.iter().map(|s| s.values(&tape)).collect(),
        model.vars.iter().map(|v| grads.wrt(*v)).collect(),
    ))
}

/// All `(event, start)` pairs whose `horizon`-step window fits.
pub fn enumerate_windows(events: &[EventSeries], history: usize, horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (k, ev) in events.iter().enumerate() {
        let steps = ev.num_steps();
        if steps > history + horizon {
            out.extend((history..steps - horizon).map(|t| (k, t)));
        }
    }
    out
}

/// Deterministic per-epoch shuffle of the training windows.
pub fn epoch_order(windows: &[(usize, usize)], seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut order = windows.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Evenly spaced subset of at most `cap` items.
fn spaced<T: Copy>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if items.len() > c => (0..c).map(|i| items[i * items.len() / c]).collect(),
        _ => items.to_vec(),
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub horizon: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub transition: Option<Transition>,
}

#[derive(Serialize, Deserialize)]
struct LogRow {
    epoch: usize,
    stage: usize,
    horizon: usize,
    lr: f64,
    train_l_node: f64,
    train_l_edge: f64,
    train_l_pred: f64,
    train_l_global: f64,
    train_l_local: f64,
    train_l_physics: f64,
    train_l_total: f64,
    val_l_node: f64,
    val_l_edge: f64,
    val_l_pred: f64,
    val_l_global: f64,
    val_l_local: f64,
    val_l_physics: f64,
    val_l_total: f64,
    transition: Option<Transition>,
}

impl From<&EpochRecord> for LogRow {
    fn from(r: &EpochRecord) -> Self {
        LogRow {
            epoch: r.epoch,
            stage: r.stage,
            horizon: r.horizon,
            lr: r.lr,
            train_l_node: r.train.l_node,
            train_l_edge: r.train.l_edge,
            train_l_pred: r.train.l_pred,
            train_l_global: r.train.l_global,
            train_l_local: r.train.l_local,
            train_l_physics: r.train.l_physics,
            train_l_total: r.train.l_total,
            val_l_node: r.val.l_node,
            val_l_edge: r.val.l_edge,
            val_l_pred: r.val.l_pred,
            val_l_global: r.val.l_global,
            val_l_local: r.val.l_local,
            val_l_physics: r.val.l_physics,
            val_l_total: r.val.l_total,
            transition: r.transition,
        }
    }
}

impl From<LogRow> for EpochRecord {
    fn from(r: LogRow) -> Self {
        EpochRecord {
            epoch: r.epoch,
            stage: r.stage,
            horizon: r.horizon,
            lr: r.lr,
            train: LossBreakdown {
                l_node: r.train_l_node,
                l_edge: r.train_l_edge,
                l_pred: r.train_l_pred,
                l_global: r.train_l_global,
                l_local: r.train_l_local,
                l_physics: r.train_l_physics,
                l_total: r.train_l_total,
            },
            val: LossBreakdown {
                l_node: r.val_l_node,
                l_edge: r.val_l_edge,
                l_pred: r.val_l_pred,
                l_global: r.val_l_global,
                l_local: r.val_l_local,
                l_physics: r.val_l_physics,
                l_total: r.val_l_total,
            },
            transition: r.transition,
        }
    }
}

/// Writes the per-epoch log as CSV (one header row, one row per epoch).
pub fn write_training_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FloodError::csv(path, e))?;
    for r in history {
        w.serialize(LogRow::from(r)).map_err(|e| FloodError::csv(path, e))?;
    }
    w.flush().map_err(|e| FloodError::io(path, e))
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| FloodError::csv(path, e))?;
    r.deserialize::<LogRow>()
        .map(|row| row.map(EpochRecord::from).map_err(|e| FloodError::csv(path, e)))
        .collect()
}

/// Inputs that stay fixed for a whole run.
pub struct TrainData<'a> {
    pub graph: &'a FloodGraph,
    pub train: &'a [EventSeries],
    pub val: &'a [EventSeries],
    pub stats: &'a NormStats,
}

/// Where a run starts from.
pub enum TrainStart {
    Fresh(ModelState),
    Resume(Box<Checkpoint>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub curriculum: CurriculumState,
    /// True when training ended by converging at `O` rather than by the
    /// global epoch cap.
    pub converged: bool,
}

/// Checkpoint layout below a run's output directory.
pub fn checkpoint_dir(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(name)
}

fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean validation breakdown at `horizon`.
pub fn validate(state: &ModelState, ctx: RolloutContext<'_>, events: &[EventSeries], horizon: usize, cap: Option<usize>) -> Result<LossBreakdown> {
    let p = state.config.features.history;
    let mut windows = Vec::new();
    for (k, ev) in events.iter().enumerate() {
        let all = enumerate_windows(std::slice::from_ref(ev), p, horizon);
        windows.extend(spaced(&all, cap).into_iter().map(|(_, t)| (k, t)));
    }
    if windows.is_empty() {
        return Err(FloodError::InvalidInput(format!(
            "no validation window fits horizon {horizon}"
        )));
    }
    let mut rows = Vec::with_capacity(windows.len());
    for (k, t) in windows {
        let (_, steps) = rollout_loss_value(state, ctx, &events[k], t, horizon)?;
        rows.push(LossBreakdown::mean(&steps));
    }
    Ok(LossBreakdown::mean(&rows))
}

/// Runs the curriculum until convergence at `O` or `max_epochs`.
///
/// With `out` set, writes `training_log.csv` after every epoch, the
/// resumable `checkpoints/last`, `checkpoints/best` on each new best
/// validation loss at the final horizon, and `checkpoints/stage_<k>` when
/// stage `k` begins.
pub fn train(data: &TrainData<'_>, cfg: &TrainConfig, start: TrainStart, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(FloodError::InvalidInput("training and validation splits must be non-empty".into()));
    }
    let (mut state, mut adam, mut cur, mut history, mut epoch) = match start {
        TrainStart::Fresh(state) => {
            let adam = AdamState::new(state.weights());
            (state, adam, CurriculumState::new(cfg), Vec::new(), 0)
        }
        TrainStart::Resume(ckpt) => {
            let snap = ckpt.training.ok_or_else(|| {
                FloodError::InvalidInput("checkpoint has no training state to resume".into())
            })?;
            let state = ckpt
                .model
                .ok_or_else(|| FloodError::InvalidInput("checkpoint holds no trainable model".into()))?;
            (state, snap.optimizer, snap.curriculum, snap.history, snap.epoch)
        }
    };
    state.config.check_graph(data.graph)?;
    check_stats(&state, data.stats)?;
    for ev in data.train.iter().chain(data.val) {
        ev.validate(data.graph)?;
    }
    let ctx = RolloutContext {
        graph: data.graph,
        stats: data.stats,
        weights: &cfg.weights,
        physics: cfg.physics,
    };
    let p = state.config.features.history;
    let mut best_final: Option<f64> = None;

    while !cur.finished && epoch < cfg.max_epochs {
        epoch += 1;
        let o = cur.horizon;
        let windows = enumerate_windows(data.train, p, o);
        if windows.is_empty() {
            return Err(FloodError::InvalidInput(format!(
                "no training window fits history {p} and horizon {o}"
            )));
        }
        let mut order = epoch_order(&windows, cfg.seed, epoch);
        if let Some(cap) = cfg.max_train_windows {
            order.truncate(cap);
        }
        let mut rows = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Vec<Array2<f64>> = state.weights().iter().map(|w| Array2::zeros(w.dim())).collect();
            for &(k, t) in batch {
                let (loss, steps, grads) = rollout_gradients(&state, ctx, &data.train[k], t, o)?;
                if !loss.is_finite() {
                    return Err(FloodError::Diverged {
                        epoch,
                        detail: format!("non-finite training loss in event {k} at t = {t}"),
                    });
                }
                for (s, g) in sum.iter_mut().zip(&grads) {
                    *s += g;
                }
                rows.push(LossBreakdown::mean(&steps));
            }
            let scale = 1.0 / batch.len() as f64;
            sum.iter_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
            let norm = global_norm(&sum);
            if !norm.is_finite() {
                return Err(FloodError::Diverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            if let Some(clip) = cfg.grad_clip {
                if norm > clip {
                    let s = clip / norm;
                    sum.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
                }
            }
            adam.update(state.weights_mut(), &sum, cur.lr, &cfg.adam);
        }
        let train_mean = LossBreakdown::mean(&rows);
        let val = validate(&state, ctx, data.val, o, cfg.max_val_windows)?;
        if !val.l_total.is_finite() {
            return Err(FloodError::Diverged {
                epoch,
                detail: "non-finite validation loss".into(),
            });
        }
        let (next, transition) = curriculum_step(&cur, val.l_total, cfg);
        history.push(EpochRecord {
            epoch,
            stage: cur.stage,
            horizon: o,
            lr: cur.lr,
            train: train_mean,
            val,
            transition,
        });
        log::info!(
            "epoch {epoch} stage {} o={o} lr={:.3e} train {:.4e} val {:.4e}{}",
            cur.stage,
            cur.lr,
            train_mean.l_total,
            val.l_total,
            transition.map(|t| format!(" [{t:?}]")).unwrap_or_default()
        );
        let advanced = next.stage != cur.stage;
        let new_best = o == cfg.target_horizon && best_final.is_none_or(|b| val.l_total < b);
        if new_best {
            best_final = Some(val.l_total);
        }
        cur = next;
        if advanced && cfg.reset_moments {
            adam.reset();
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| FloodError::io(dir, e))?;
            write_training_log(&dir.join("training_log.csv"), &history)?;
            let ckpt = Checkpoint::trained(
                state.clone(),
                data.stats.clone(),
                Some(TrainingSnapshot {
                    config: cfg.clone(),
                    curriculum: cur.clone(),
                    optimizer: adam.clone(),
                    epoch,
                    history: history.clone(),
                }),
            );
            save_checkpoint(&checkpoint_dir(dir, "last"), &ckpt)?;
            if new_best {
                save_checkpoint(&checkpoint_dir(dir, "best"), &ckpt)?;
            }
            if advanced {
                save_checkpoint(&checkpoint_dir(dir, &format!("stage_{}", cur.stage)), &ckpt)?;
            }
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        converged: cur.finished,
        curriculum: cur,
    })
}
