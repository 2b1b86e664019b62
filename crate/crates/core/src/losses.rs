//! Training objectives: multi-task prediction loss, global and local
//! mass-balance regularizers, their weighted sum, and the rollout mean.
//!
//! Prediction losses are evaluated in normalized target space. Mass-balance
//! losses are evaluated in physical units (m³) on the model-updated state
//! difference `ΔV = V(t+1) - V(t)` and the predicted flows `Q(t+1)`.
//!
//! For node `i` over one step the local residual is
//!
//! ```text
//! r_i = ΔV_i - ((Q_i+ - Q_i- + b_i) · Δt + R_i)
//! ```
//!
//! where `Q_i+`/`Q_i-` come from [`crate::graph::compute_node_fluxes`] and
//! `b_i` is the external boundary flux at inflow/outflow nodes. The global
//! residual sums `ΔV` over all nodes against the catchment-level forcing.

use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::graph::{compute_node_fluxes, node_fluxes_on_tape, FloodGraph};
use crate::tape::{Tape, Var};

/// Coefficients λ1..λ4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub node: f64,
    pub edge: f64,
    pub global: f64,
    pub local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            node: 1.0,
            edge: 1.0,
            global: 1e-3,
            local: 1e-3,
        }
    }
}

/// Which mass-balance terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsMode {
    Both,
    Global,
    Local,
    None,
}

impl LossWeights {
    /// Zeroes the inactive physics coefficients.
    pub fn with_physics(mut self, mode: PhysicsMode) -> Self {
        match mode {
            PhysicsMode::Both => {}
            PhysicsMode::Global => self.local = 0.0,
            PhysicsMode::Local => self.global = 0.0,
            PhysicsMode::None => {
                self.global = 0.0;
                self.local = 0.0;
            }
        }
        self
    }

    fn validate(&self) -> Result<()> {
        let all = [self.node, self.edge, self.global, self.local];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(FloodError::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Treatment of inflow/outflow nodes in the local balance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTreatment {
    /// Add the boundary exchange as a ghost flux `b_i`.
    #[default]
    GhostFlux,
    /// Drop boundary nodes from the local sum.
    ExcludeNodes,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub boundary: BoundaryTreatment,
    pub local_reduction: LocalReduction,
}

/// Boundary conditions for a single step `t -> t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepForcing {
    /// Rainfall volume per node during the step (m³).
    pub rainfall: Vec<f64>,
    /// Global boundary inflow (m³/s).
    pub inflow: f64,
    /// Global boundary outflow (m³/s).
    pub outflow: f64,
    /// Step length (s).
    pub dt: f64,
}

impl StepForcing {
    fn check(&self) -> Result<()> {
        let finite = self.rainfall.iter().all(|v| v.is_finite())
            && self.inflow.is_finite()
            && self.outflow.is_finite()
            && self.dt.is_finite();
        if !finite {
            return Err(FloodError::InvalidInput("non-finite forcing".into()));
        }
        Ok(())
    }

    fn rain_total(&self) -> f64 {
        self.rainfall.iter().sum()
    }
}

/// Per-step loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_node: f64,
    pub l_edge: f64,
    pub l_pred: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub l_physics: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l_node += b.l_node;
            acc.l_edge += b.l_edge;
            acc.l_pred += b.l_pred;
            acc.l_global += b.l_global;
            acc.l_local += b.l_local;
            acc.l_physics += b.l_physics;
            acc.l_total += b.l_total;
        }
        LossBreakdown {
            l_node: acc.l_node / n,
            l_edge: acc.l_edge / n,
            l_pred: acc.l_pred / n,
            l_global: acc.l_global / n,
            l_local: acc.l_local / n,
            l_physics: acc.l_physics / n,
            l_total: acc.l_total / n,
        }
    }
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StepLossVars {
    pub node: Var,
    pub edge: Var,
    pub pred: Var,
    pub global: Var,
    pub local: Var,
    pub physics: Var,
    pub total: Var,
}

impl StepLossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_node: tape.scalar(self.node),
            l_edge: tape.scalar(self.edge),
            l_pred: tape.scalar(self.pred),
            l_global: tape.scalar(self.global),
            l_local: tape.scalar(self.local),
            l_physics: tape.scalar(self.physics),
            l_total: tape.scalar(self.total),
        }
    }
}

/// `(L_node, L_edge, L_pred)` on the tape; all inputs are `n×1` columns in
/// normalized target space.
pub fn prediction_loss_on_tape(
    tape: &Tape,
    pred_dv: Var,
    pred_dq: Var,
    true_dv: Var,
    true_dq: Var,
    weights: &LossWeights,
) -> (Var, Var, Var) {
    let node = tape.mean(tape.square(tape.sub(true_dv, pred_dv)));
    let edge = tape.mean(tape.square(tape.sub(true_dq, pred_dq)));
    let pred = tape.add(
        tape.affine(node, weights.node, 0.0),
        tape.affine(edge, weights.edge, 0.0),
    );
    (node, edge, pred)
}

/// Global balance `|ΣΔV - ((Q_in - Q_out)Δt + ΣR)|` on the tape.
pub fn global_mass_loss_on_tape(tape: &Tape, delta_volume: Var, forcing: &StepForcing) -> Var {
    let external = (forcing.inflow - forcing.outflow) * forcing.dt + forcing.rain_total();
    tape.abs(tape.affine(tape.sum(delta_volume), 1.0, -external))
}

/// Per-node residual column `r_i` on the tape (before the absolute value).
fn local_residual_on_tape(
    tape: &Tape,
    graph: &FloodGraph,
    delta_volume: Var,
    next_flow: Var,
    forcing: &StepForcing,
    cfg: PhysicsConfig,
) -> Var {
    let (inflow, outflow) = node_fluxes_on_tape(tape, graph, next_flow);
    let net = tape.sub(inflow, outflow);
    let boundary = match cfg.boundary {
        BoundaryTreatment::GhostFlux => graph.boundary_flux(forcing.inflow, forcing.outflow),
        BoundaryTreatment::ExcludeNodes => vec![0.0; graph.num_nodes()],
    };
    let constant: Vec<f64> = boundary
        .iter()
        .zip(&forcing.rainfall)
        .map(|(b, r)| b * forcing.dt + r)
        .collect();
    let exchanged = tape.add(tape.affine(net, forcing.dt, 0.0), tape.column(&constant));
    tape.sub(delta_volume, exchanged)
}

/// Local balance `Σ_i |r_i|` (or its mean) on the tape.
pub fn local_mass_loss_on_tape(
    tape: &Tape,
    graph: &FloodGraph,
    delta_volume: Var,
    next_flow: Var,
    forcing: &StepForcing,
    cfg: PhysicsConfig,
) -> Var {
    let residual = local_residual_on_tape(tape, graph, delta_volume, next_flow, forcing, cfg);
    let residual = match cfg.boundary {
        BoundaryTreatment::GhostFlux => residual,
        BoundaryTreatment::ExcludeNodes => {
            let mask = graph.boundary_mask();
            let keep: Vec<usize> = (0..graph.num_nodes()).filter(|&i| !mask[i]).collect();
            tape.gather_rows(residual, keep.into())
        }
    };
    let abs = tape.abs(residual);
    match cfg.local_reduction {
        LocalReduction::Sum => tape.sum(abs),
        LocalReduction::Mean => tape.mean(abs),
    }
}

/// Normalized-space prediction and physical-space consequences of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// Predicted `ΔV̂`, normalized.
    pub dv_norm: Var,
    /// Predicted `ΔQ̂`, normalized.
    pub dq_norm: Var,
    /// Model-updated `V(t+1) - V(t)` in m³.
    pub dv_phys: Var,
    /// Model-updated `Q(t+1)` in m³/s.
    pub q_next: Var,
}

/// Full per-step objective on the tape.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &Tape,
    graph: &FloodGraph,
    step: &StepVars,
    true_dv_norm: Var,
    true_dq_norm: Var,
    forcing: &StepForcing,
    weights: &LossWeights,
    cfg: PhysicsConfig,
) -> StepLossVars {
    let (node, edge, pred) =
        prediction_loss_on_tape(tape, step.dv_norm, step.dq_norm, true_dv_norm, true_dq_norm, weights);
    let global = global_mass_loss_on_tape(tape, step.dv_phys, forcing);
    let local = local_mass_loss_on_tape(tape, graph, step.dv_phys, step.q_next, forcing, cfg);
    let physics = tape.add(
        tape.affine(global, weights.global, 0.0),
        tape.affine(local, weights.local, 0.0),
    );
    let total = tape.add(pred, physics);
    StepLossVars {
        node,
        edge,
        pred,
        global,
        local,
        physics,
        total,
    }
}

/// Mean of per-step totals on the tape.
pub fn rollout_loss_on_tape(tape: &Tape, step_totals: &[Var]) -> Result<Var> {
    let (first, rest) = step_totals
        .split_first()
        .ok_or_else(|| FloodError::InvalidInput("rollout loss over zero steps".into()))?;
    let mut acc = *first;
    for v in rest {
        acc = tape.add(acc, *v);
    }
    Ok(tape.affine(acc, 1.0 / step_totals.len() as f64, 0.0))
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FloodError::InvalidInput(format!("non-finite values in {what}")))
    }
}

fn check_len(what: &str, values: &[f64], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(FloodError::Shape(format!(
            "{what} has length {}, expected {expected}",
            values.len()
        )));
    }
    Ok(())
}

/// `(L_node, L_edge, L_pred)` on plain vectors.
pub fn prediction_loss(
    pred_dv: &[f64],
    pred_dq: &[f64],
    true_dv: &[f64],
    true_dq: &[f64],
    weights: &LossWeights,
) -> Result<(f64, f64, f64)> {
    check_len("true ΔV", true_dv, pred_dv.len())?;
    check_len("true ΔQ", true_dq, pred_dq.len())?;
    if pred_dv.is_empty() || pred_dq.is_empty() {
        return Err(FloodError::Shape("empty prediction".into()));
    }
    let tape = Tape::new();
    let (n, e, p) = prediction_loss_on_tape(
        &tape,
        tape.column(pred_dv),
        tape.column(pred_dq),
        tape.column(true_dv),
        tape.column(true_dq),
        weights,
    );
    Ok((tape.scalar(n), tape.scalar(e), tape.scalar(p)))
}

/// Signed global residual `ΣΔV - ((Q_in - Q_out)Δt + ΣR)`.
pub fn global_residual(delta_volume: &[f64], forcing: &StepForcing) -> f64 {
    let dv: f64 = delta_volume.iter().sum();
    dv - ((forcing.inflow - forcing.outflow) * forcing.dt + forcing.rain_total())
}

/// Global mass loss on plain vectors.
pub fn global_mass_loss(delta_volume: &[f64], forcing: &StepForcing) -> Result<f64> {
    check_finite("ΔV", delta_volume)?;
    forcing.check()?;
    check_len("rainfall", &forcing.rainfall, delta_volume.len())?;
    Ok(global_residual(delta_volume, forcing).abs())
}

/// Signed per-node local residuals; boundary nodes carry the ghost flux.
pub fn local_residuals(
    graph: &FloodGraph,
    delta_volume: &[f64],
    next_flow: &[f64],
    forcing: &StepForcing,
) -> Result<Vec<f64>> {
    check_len("ΔV", delta_volume, graph.num_nodes())?;
    check_len("rainfall", &forcing.rainfall, graph.num_nodes())?;
    check_finite("ΔV", delta_volume)?;
    forcing.check()?;
    let (inflow, outflow) = compute_node_fluxes(graph, next_flow)?;
    let b = graph.boundary_flux(forcing.inflow, forcing.outflow);
    Ok((0..graph.num_nodes())
        .map(|i| {
            delta_volume[i] - ((inflow[i] - outflow[i] + b[i]) * forcing.dt + forcing.rainfall[i])
        })
        .collect())
}

/// Local mass loss on plain vectors, taking the states on either side of
/// the step.
pub fn local_mass_loss(
    graph: &FloodGraph,
    volume: &[f64],
    next_volume: &[f64],
    next_flow: &[f64],
    forcing: &StepForcing,
    cfg: PhysicsConfig,
) -> Result<f64> {
    check_len("V(t)", volume, graph.num_nodes())?;
    check_len("V(t+1)", next_volume, graph.num_nodes())?;
    check_len("Q(t+1)", next_flow, graph.num_edges())?;
    check_len("rainfall", &forcing.rainfall, graph.num_nodes())?;
    check_finite("V", volume)?;
    check_finite("V(t+1)", next_volume)?;
    check_finite("Q(t+1)", next_flow)?;
    forcing.check()?;
    let dv: Vec<f64> = next_volume.iter().zip(volume).map(|(a, b)| a - b).collect();
    let tape = Tape::new();
    let l = local_mass_loss_on_tape(&tape, graph, tape.column(&dv), tape.column(next_flow), forcing, cfg);
    Ok(tape.scalar(l))
}

/// Normalized predictions and targets for [`total_loss`].
#[derive(Clone, Debug)]
pub struct NormalizedStep<'a> {
    pub pred_dv: &'a [f64],
    pub pred_dq: &'a [f64],
    pub true_dv: &'a [f64],
    pub true_dq: &'a [f64],
}

/// Full per-step objective on plain vectors. `dv_phys` is the physical
/// volume change and `q_next` the updated flows.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    graph: &FloodGraph,
    step: &NormalizedStep<'_>,
    dv_phys: &[f64],
    q_next: &[f64],
    forcing: &StepForcing,
    weights: &LossWeights,
    cfg: PhysicsConfig,
) -> Result<LossBreakdown> {
    weights.validate()?;
    check_len("ΔV̂", step.pred_dv, graph.num_nodes())?;
    check_len("ΔQ̂", step.pred_dq, graph.num_edges())?;
    check_len("ΔV̄", step.true_dv, graph.num_nodes())?;
    check_len("ΔQ̄", step.true_dq, graph.num_edges())?;
    check_len("ΔV", dv_phys, graph.num_nodes())?;
    check_len("Q(t+1)", q_next, graph.num_edges())?;
    check_len("rainfall", &forcing.rainfall, graph.num_nodes())?;
    for (what, v) in [
        ("ΔV̂", step.pred_dv),
        ("ΔQ̂", step.pred_dq),
        ("ΔV̄", step.true_dv),
        ("ΔQ̄", step.true_dq),
        ("ΔV", dv_phys),
        ("Q(t+1)", q_next),
    ] {
        check_finite(what, v)?;
    }
    forcing.check()?;
    let tape = Tape::new();
    let vars = StepVars {
        dv_norm: tape.column(step.pred_dv),
        dq_norm: tape.column(step.pred_dq),
        dv_phys: tape.column(dv_phys),
        q_next: tape.column(q_next),
    };
    let out = total_loss_on_tape(
        &tape,
        graph,
        &vars,
        tape.column(step.true_dv),
        tape.column(step.true_dq),
        forcing,
        weights,
        cfg,
    );
    Ok(out.values(&tape))
}

/// Arithmetic mean of per-step totals.
pub fn rollout_loss(steps: &[LossBreakdown]) -> Result<f64> {
    if steps.is_empty() {
        return Err(FloodError::InvalidInput("rollout loss over zero steps".into()));
    }
    Ok(steps.iter().map(|s| s.l_total).sum::<f64>() / steps.len() as f64)
}
