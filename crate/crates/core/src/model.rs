//! Encode–process–decode graph network predicting per-step volume and flow
//! changes.
//!
//! Every MLP is bias-free with a ReLU after each layer except the last, so
//! the whole network maps an all-zero input to an all-zero output. Each
//! message-passing layer computes, for every directed edge `j -> i`,
//!
//! ```text
//! m_ji    = MLP_msg(h_i ‖ h_j ‖ e_ij)
//! h_i'    = h_i + MLP_upd(Σ_j m_ji)
//! e_ij'   = e_ij + m_ji            (or m_ji with EdgeUpdate::Overwrite)
//! ```
//!
//! Decoders map the final latents to normalized `ΔV̂` per node and `ΔQ̂` per
//! edge; [`forward_step`] denormalizes them to m³ and m³/s.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    edge_layout, node_layout, ColumnStats, EdgeColumn, EventSeries, FeatureConfig, NodeColumn,
    NormStats,
};
use crate::error::{FloodError, Result};
use crate::graph::FloodGraph;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeUpdate {
    /// `e' = e + m`
    #[default]
    Residual,
    /// `e' = m`
    Overwrite,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// Nodes aggregate messages along their incoming edges only.
    #[default]
    Incoming,
    /// Messages also travel against the edge orientation.
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent width `d`.
    pub latent_dim: usize,
    /// Message-passing layers `L_GNN`.
    pub gnn_layers: usize,
    /// Layers per MLP `L_MLP`.
    pub mlp_layers: usize,
    pub features: FeatureConfig,
    /// Node input width `f_v`; derived from the graph and `features`.
    pub node_inputs: usize,
    /// Edge input width `f_e`.
    pub edge_inputs: usize,
    #[serde(default)]
    pub edge_update: EdgeUpdate,
    #[serde(default)]
    pub neighborhood: Neighborhood,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with input widths derived from `graph` and `features`.
    pub fn for_graph(graph: &FloodGraph, features: FeatureConfig) -> Self {
        Self {
            latent_dim: 64,
            gnn_layers: 4,
            mlp_layers: 2,
            features,
            node_inputs: node_layout(graph.static_node_features().ncols(), features).len(),
            edge_inputs: edge_layout(graph.static_edge_features().ncols(), features).len(),
            edge_update: EdgeUpdate::default(),
            neighborhood: Neighborhood::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.gnn_layers == 0 || self.mlp_layers == 0 {
            return Err(FloodError::Config(format!(
                "latent_dim, gnn_layers and mlp_layers must be at least 1 (got {}, {}, {})",
                self.latent_dim, self.gnn_layers, self.mlp_layers
            )));
        }
        if self.node_inputs == 0 || self.edge_inputs == 0 {
            return Err(FloodError::Config("input widths must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the config's input widths match what `graph` yields.
    pub fn check_graph(&self, graph: &FloodGraph) -> Result<()> {
        let fv = node_layout(graph.static_node_features().ncols(), self.features).len();
        let fe = edge_layout(graph.static_edge_features().ncols(), self.features).len();
        if fv != self.node_inputs || fe != self.edge_inputs {
            return Err(FloodError::Schema(format!(
                "model expects f_v = {}, f_e = {} but the dataset provides f_v = {fv}, f_e = {fe}",
                self.node_inputs, self.edge_inputs
            )));
        }
        Ok(())
    }

    fn mlp_dims(&self, input: usize, output: usize) -> Vec<(usize, usize)> {
        let d = self.latent_dim;
        let l = self.mlp_layers;
        (0..l)
            .map(|k| {
                let i = if k == 0 { input } else { d };
                let o = if k + 1 == l { output } else { d };
                (o, i)
            })
            .collect()
    }

    fn layout(&self) -> Vec<(String, Vec<(usize, usize)>)> {
        let d = self.latent_dim;
        let mut out = vec![
            ("node_encoder".to_string(), self.mlp_dims(self.node_inputs, d)),
            ("edge_encoder".to_string(), self.mlp_dims(self.edge_inputs, d)),
        ];
        for l in 0..self.gnn_layers {
            out.push((format!("message_{l}"), self.mlp_dims(3 * d, d)));
            out.push((format!("update_{l}"), self.mlp_dims(d, d)));
        }
        out.push(("node_decoder".to_string(), self.mlp_dims(d, 1)));
        out.push(("edge_decoder".to_string(), self.mlp_dims(d, 1)));
        out
    }

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .flat_map(|(_, dims)| dims.iter().map(|(o, i)| o * i))
            .sum()
    }
}

/// All weights of a network. Matrices are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    weights: Vec<Array2<f64>>,
    /// Index ranges into `weights`, one per MLP, in layout order.
    mlps: Vec<std::ops::Range<usize>>,
}

impl ModelState {
    /// Builds a state from explicit weights in [`ModelState::param_names`] order.
    pub fn from_weights(config: ModelConfig, weights: Vec<Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let mut state = Self::zeros(config);
        if weights.len() != state.weights.len() {
            return Err(FloodError::Shape(format!(
                "expected {} weight matrices, got {}",
                state.weights.len(),
                weights.len()
            )));
        }
        for (k, w) in weights.into_iter().enumerate() {
            if w.dim() != state.weights[k].dim() {
                return Err(FloodError::Shape(format!(
                    "{} is {:?}, expected {:?}",
                    state.names[k],
                    w.dim(),
                    state.weights[k].dim()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(FloodError::InvalidInput(format!("{} has non-finite weights", state.names[k])));
            }
            state.weights[k] = w;
        }
        Ok(state)
    }

    /// Every weight zero.
    pub fn zeros(config: ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut weights = Vec::new();
        let mut mlps = Vec::new();
        for (name, dims) in config.layout() {
            let start = weights.len();
            for (k, (o, i)) in dims.into_iter().enumerate() {
                names.push(format!("{name}.{k}"));
                weights.push(Array2::zeros((o, i)));
            }
            mlps.push(start..weights.len());
        }
        Self {
            config,
            names,
            weights,
            mlps,
        }
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Registers every weight on `tape` as a trainable parameter.
    pub fn on_tape(&self, tape: &Tape) -> TapeModel {
        TapeModel {
            vars: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            ..self.on_tape_shape()
        }
    }

    /// Registers the weights as constants (no gradients).
    pub fn on_tape_frozen(&self, tape: &Tape) -> TapeModel {
        TapeModel {
            vars: self.weights.iter().map(|w| tape.constant(w.clone())).collect(),
            ..self.on_tape_shape()
        }
    }

    fn on_tape_shape(&self) -> TapeModel {
        TapeModel {
            vars: Vec::new(),
            mlps: self.mlps.clone(),
            gnn_layers: self.config.gnn_layers,
            edge_update: self.config.edge_update,
            neighborhood: self.config.neighborhood,
            features: self.config.features,
        }
    }
}

/// Seeded fan-in-scaled uniform initialization, rounded to f32 so that
/// checkpoints reproduce the state exactly.
pub fn init_model(config: ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let mut state = ModelState::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
    for range in state.mlps.clone() {
        let last = range.end - 1;
        for k in range {
            let w = &mut state.weights[k];
            let bound = init_bound(w.ncols(), k == last);
            w.mapv_inplace(|_| f64::from(rng.gen_range(-bound..bound) as f32));
        }
    }
    Ok(state)
}

/// Uniform bound for a layer with `fan_in` inputs: variance-preserving
/// under ReLU for hidden layers, plain `1/fan_in` variance for outputs.
pub fn init_bound(fan_in: usize, output_layer: bool) -> f64 {
    let gain = if output_layer { 3.0 } else { 6.0 };
    (gain / fan_in as f64).sqrt()
}

/// Model weights registered on a tape.
#[derive(Clone, Debug)]
pub struct TapeModel {
    pub vars: Vec<Var>,
    mlps: Vec<std::ops::Range<usize>>,
    gnn_layers: usize,
    edge_update: EdgeUpdate,
    neighborhood: Neighborhood,
    features: FeatureConfig,
}

impl TapeModel {
    pub fn features(&self) -> FeatureConfig {
        self.features
    }

    fn mlp(&self, tape: &Tape, which: usize, x: Var) -> Var {
        let range = self.mlps[which].clone();
        let last = range.end - 1;
        let mut h = x;
        for k in range {
            h = tape.matmul_t(h, self.vars[k]);
            if k != last {
                h = tape.relu(h);
            }
        }
        h
    }

    fn decoders(&self) -> (usize, usize) {
        let n = self.mlps.len();
        (n - 2, n - 1)
    }

    /// `(H⁰, ε⁰)` from normalized inputs.
    pub fn encode(&self, tape: &Tape, x: Var, e: Var) -> (Var, Var) {
        (self.mlp(tape, 0, x), self.mlp(tape, 1, e))
    }

    /// One message-passing layer.
    pub fn process_layer(&self, tape: &Tape, graph: &FloodGraph, layer: usize, h: Var, eps: Var) -> (Var, Var) {
        let n = graph.num_nodes();
        // encoders occupy slots 0 and 1, then (message, update) per layer
        let msg = 2 + 2 * layer;
        let upd = msg + 1;
        let h_dst = tape.gather_rows(h, graph.dst().clone());
        let h_src = tape.gather_rows(h, graph.src().clone());
        let forward = self.mlp(tape, msg, tape.concat_cols(&[h_dst, h_src, eps]));
        let mut agg = tape.scatter_add_rows(forward, graph.dst().clone(), n);
        if self.neighborhood == Neighborhood::Bidirectional {
            let backward = self.mlp(tape, msg, tape.concat_cols(&[h_src, h_dst, eps]));
            agg = tape.add(agg, tape.scatter_add_rows(backward, graph.src().clone(), n));
        }
        let h_next = tape.add(h, self.mlp(tape, upd, agg));
        let e_next = match self.edge_update {
            EdgeUpdate::Residual => tape.add(eps, forward),
            EdgeUpdate::Overwrite => forward,
        };
        (h_next, e_next)
    }

    /// Normalized `(ΔV̂, ΔQ̂)` columns from final latents.
    pub fn decode(&self, tape: &Tape, h: Var, eps: Var) -> (Var, Var) {
        let (nd, ed) = self.decoders();
        (self.mlp(tape, nd, h), self.mlp(tape, ed, eps))
    }

    /// Full encode, process, decode pass on normalized inputs.
    pub fn forward(&self, tape: &Tape, graph: &FloodGraph, x: Var, e: Var) -> (Var, Var) {
        let (mut h, mut eps) = self.encode(tape, x, e);
        for l in 0..self.gnn_layers {
            (h, eps) = self.process_layer(tape, graph, l, h, eps);
        }
        self.decode(tape, h, eps)
    }
}

fn check_cols(what: &str, x: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if x.dim() != (rows, cols) {
        return Err(FloodError::Shape(format!(
            "{what} is {:?}, expected ({rows}, {cols})",
            x.dim()
        )));
    }
    Ok(())
}

/// Encodes normalized node and edge features into latents.
pub fn encode(
    state: &ModelState,
    graph: &FloodGraph,
    x: &Array2<f64>,
    e: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_cols("node features", x, graph.num_nodes(), state.config.node_inputs)?;
    check_cols("edge features", e, graph.num_edges(), state.config.edge_inputs)?;
    let tape = Tape::new();
    let m = state.on_tape_frozen(&tape);
    let (h, eps) = m.encode(&tape, tape.constant(x.clone()), tape.constant(e.clone()));
    let out = (tape.value(h).clone(), tape.value(eps).clone());
    Ok(out)
}

/// Applies message-passing layer `layer` to latents.
pub fn process_layer(
    state: &ModelState,
    graph: &FloodGraph,
    layer: usize,
    h: &Array2<f64>,
    eps: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = state.config.latent_dim;
    if layer >= state.config.gnn_layers {
        return Err(FloodError::InvalidInput(format!(
            "layer {layer} out of range for {} layers",
            state.config.gnn_layers
        )));
    }
    check_cols("node latents", h, graph.num_nodes(), d)?;
    check_cols("edge latents", eps, graph.num_edges(), d)?;
    let tape = Tape::new();
    let m = state.on_tape_frozen(&tape);
    let (h2, e2) = m.process_layer(&tape, graph, layer, tape.constant(h.clone()), tape.constant(eps.clone()));
    let out = (tape.value(h2).clone(), tape.value(e2).clone());
    Ok(out)
}

/// Decodes latents to normalized `(ΔV̂, ΔQ̂)`.
pub fn decode(state: &ModelState, graph: &FloodGraph, h: &Array2<f64>, eps: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = state.config.latent_dim;
    check_cols("node latents", h, graph.num_nodes(), d)?;
    check_cols("edge latents", eps, graph.num_edges(), d)?;
    let tape = Tape::new();
    let m = state.on_tape_frozen(&tape);
    let (v, q) = m.decode(&tape, tape.constant(h.clone()), tape.constant(eps.clone()));
    Ok((tape.column_values(v), tape.column_values(q)))
}

/// Physical one-step changes.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// ΔV per node (m³).
    pub delta_volume: Vec<f64>,
    /// ΔQ per edge (m³/s).
    pub delta_flow: Vec<f64>,
}

/// Dynamic state the feature windows read from: `volume[k]` and `flow[k]`
/// hold the `n×1` and `e×1` columns for timestep `first + k`.
#[derive(Clone, Debug)]
pub struct History {
    pub first: usize,
    pub volume: Vec<Var>,
    pub flow: Vec<Var>,
}

impl History {
    /// Ground-truth states `first..=last` registered as constants.
    pub fn from_event(tape: &Tape, event: &EventSeries, first: usize, last: usize) -> Self {
        let col = |row: ndarray::ArrayView1<f32>| tape.column(&row.iter().map(|v| f64::from(*v)).collect::<Vec<_>>());
        Self {
            first,
            volume: (first..=last).map(|t| col(event.node_volume.row(t))).collect(),
            flow: (first..=last).map(|t| col(event.edge_flow.row(t))).collect(),
        }
    }

    /// Last timestep held.
    pub fn last(&self) -> usize {
        self.first + self.volume.len() - 1
    }

    pub fn volume_at(&self, t: usize) -> Var {
        self.volume[t - self.first]
    }

    pub fn flow_at(&self, t: usize) -> Var {
        self.flow[t - self.first]
    }

    /// Appends the state for timestep `last() + 1`.
    pub fn push(&mut self, volume: Var, flow: Var) {
        self.volume.push(volume);
        self.flow.push(flow);
    }
}

/// Normalized `(X^t, E^t)` on the tape. Dynamic state comes from `history`;
/// static features and forcing come from `graph` and `event`.
pub fn window_on_tape(
    tape: &Tape,
    graph: &FloodGraph,
    event: &EventSeries,
    t: usize,
    features: FeatureConfig,
    stats: &NormStats,
    history: &History,
) -> Result<(Var, Var)> {
    let p = features.history;
    if t < p || t < history.first + p {
        return Err(FloodError::InsufficientHistory { t, p });
    }
    if t > history.last() || t >= event.num_steps() {
        return Err(FloodError::HorizonExceedsEvent {
            start: t,
            horizon: 0,
            num_steps: event.num_steps(),
        });
    }
    let n = graph.num_nodes();
    let to_f64 = |v: ndarray::ArrayView1<f32>| v.iter().map(|x| f64::from(*x)).collect::<Vec<_>>();
    let node_cols: Vec<Var> = node_layout(graph.static_node_features().ncols(), features)
        .into_iter()
        .map(|c| match c {
            NodeColumn::Static(k) => tape.column(&to_f64(graph.static_node_features().column(k))),
            NodeColumn::Volume { lag } => history.volume_at(t - lag),
            NodeColumn::Rainfall { lag } => tape.column(&to_f64(event.rainfall.row(t - lag))),
            NodeColumn::Inflow { lag } => tape.column(&vec![f64::from(event.inflow_bc[t - lag]); n]),
            NodeColumn::Outflow { lag } => tape.column(&vec![f64::from(event.outflow_bc[t - lag]); n]),
        })
        .collect();
    let edge_cols: Vec<Var> = edge_layout(graph.static_edge_features().ncols(), features)
        .into_iter()
        .map(|c| match c {
            EdgeColumn::Static(k) => tape.column(&to_f64(graph.static_edge_features().column(k))),
            EdgeColumn::Flow { lag } => history.flow_at(t - lag),
        })
        .collect();
    let normalize = |cols: &[Var], s: &ColumnStats| -> Result<Var> {
        if cols.len() != s.width() {
            return Err(FloodError::Schema(format!(
                "window has {} columns, statistics cover {}",
                cols.len(),
                s.width()
            )));
        }
        let scales: Vec<f64> = s.std.iter().map(|sd| 1.0 / sd).collect();
        let shifts: Vec<f64> = s.mean.iter().zip(&s.std).map(|(m, sd)| -m / sd).collect();
        Ok(tape.column_affine(tape.concat_cols(cols), &scales, &shifts))
    };
    Ok((normalize(&node_cols, &stats.node)?, normalize(&edge_cols, &stats.edge)?))
}

/// One model step on the tape, normalized and physical.
#[derive(Clone, Copy, Debug)]
pub struct TapeStep {
    pub dv_norm: Var,
    pub dq_norm: Var,
    /// ΔV (m³)
    pub delta_volume: Var,
    /// ΔQ (m³/s)
    pub delta_flow: Var,
}

impl TapeModel {
    /// Forward pass plus target denormalization.
    pub fn step(&self, tape: &Tape, graph: &FloodGraph, x: Var, e: Var, stats: &NormStats) -> TapeStep {
        let (dv_norm, dq_norm) = self.forward(tape, graph, x, e);
        let dv = &stats.delta_volume;
        let dq = &stats.delta_flow;
        TapeStep {
            dv_norm,
            dq_norm,
            delta_volume: tape.affine(dv_norm, dv.std[0], dv.mean[0]),
            delta_flow: tape.affine(dq_norm, dq.std[0], dq.mean[0]),
        }
    }
}

pub(crate) fn check_stats(state: &ModelState, stats: &NormStats) -> Result<()> {
    let c = &state.config;
    if stats.node.width() != c.node_inputs || stats.edge.width() != c.edge_inputs {
        return Err(FloodError::Schema(format!(
            "normalization covers {}/{} columns, model expects {}/{}",
            stats.node.width(),
            stats.edge.width(),
            c.node_inputs,
            c.edge_inputs
        )));
    }
    if stats.delta_volume.width() != 1 || stats.delta_flow.width() != 1 {
        return Err(FloodError::Schema("target statistics must have one column each".into()));
    }
    Ok(())
}

/// Predicts physical `(ΔV, ΔQ)` for the step `t -> t+1`.
pub fn forward_step(
    state: &ModelState,
    graph: &FloodGraph,
    event: &EventSeries,
    t: usize,
    stats: &NormStats,
) -> Result<StepOutput> {
    check_stats(state, stats)?;
    state.config.check_graph(graph)?;
    let p = state.config.features.history;
    if t < p {
        return Err(FloodError::InsufficientHistory { t, p });
    }
    if t >= event.num_steps() {
        return Err(FloodError::HorizonExceedsEvent {
            start: t,
            horizon: 0,
            num_steps: event.num_steps(),
        });
    }
    let tape = Tape::new();
    let history = History::from_event(&tape, event, t - p, t);
    let (x, e) = window_on_tape(&tape, graph, event, t, state.config.features, stats, &history)?;
    let out = state.on_tape_frozen(&tape).step(&tape, graph, x, e, stats);
    Ok(StepOutput {
        delta_volume: tape.column_values(out.delta_volume),
        delta_flow: tape.column_values(out.delta_flow),
    })
}

/// Anything that can advance an event by one step.
pub trait Predictor {
    fn features(&self) -> FeatureConfig;

    /// Physical changes for `t -> t+1`, reading the (possibly predicted)
    /// history in `series`.
    fn predict(&self, graph: &FloodGraph, series: &EventSeries, t: usize) -> Result<StepOutput>;
}

/// A trained network with its normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFlood {
    pub state: ModelState,
    pub stats: NormStats,
}

impl Predictor for DualFlood {
    fn features(&self) -> FeatureConfig {
        self.state.config.features
    }

    fn predict(&self, graph: &FloodGraph, series: &EventSeries, t: usize) -> Result<StepOutput> {
        forward_step(&self.state, graph, series, t, &self.stats)
    }
}

/// Returns the true change from the current (possibly predicted) state to
/// the next ground-truth state, so a rollout reproduces the truth exactly.
#[derive(Clone, Debug)]
pub struct OracleStub {
    pub truth: EventSeries,
    pub features: FeatureConfig,
}

impl Predictor for OracleStub {
    fn features(&self) -> FeatureConfig {
        self.features
    }

    fn predict(&self, _graph: &FloodGraph, series: &EventSeries, t: usize) -> Result<StepOutput> {
        if t + 1 >= self.truth.num_steps() {
            return Err(FloodError::HorizonExceedsEvent {
                start: t,
                horizon: 1,
                num_steps: self.truth.num_steps(),
            });
        }
        let diff = |next: ndarray::ArrayView1<f32>, now: ndarray::ArrayView1<f32>| -> Vec<f64> {
            next.iter().zip(now.iter()).map(|(a, b)| f64::from(*a) - f64::from(*b)).collect()
        };
        Ok(StepOutput {
            delta_volume: diff(self.truth.node_volume.row(t + 1), series.node_volume.row(t)),
            delta_flow: diff(self.truth.edge_flow.row(t + 1), series.edge_flow.row(t)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_support::toy_graph;
    use crate::synthetic::{generate_catchment, CatchmentSpec};

    fn tiny_config(graph: &FloodGraph, d: usize, layers: usize, mlp: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: d,
            gnn_layers: layers,
            mlp_layers: mlp,
            seed: 5,
            ..ModelConfig::for_graph(graph, FeatureConfig::default())
        }
    }

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let g = toy_graph(4, &[(0, 1), (1, 2), (2, 3)], 10.0);
        let cfg = tiny_config(&g, 8, 2, 2);
        let a = init_model(cfg.clone()).unwrap();
        assert_eq!(a, init_model(cfg.clone()).unwrap());
        for (name, w) in a.param_names().iter().zip(a.weights()) {
            let output = name.ends_with(".1");
            let bound = init_bound(w.ncols(), output);
            assert!(w.iter().all(|v| v.is_finite() && v.abs() <= bound), "{name}");
            assert!(w.iter().all(|v| f64::from(*v as f32) == *v));
        }
        let other = init_model(ModelConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn parameter_count_formula() {
        let g = toy_graph(3, &[(0, 1), (1, 2)], 1.0);
        for (d, l, m) in [(4, 1, 1), (8, 3, 2), (5, 2, 3)] {
            let cfg = tiny_config(&g, d, l, m);
            let (fv, fe) = (cfg.node_inputs, cfg.edge_inputs);
            let mlp = |i: usize, o: usize| if m == 1 { i * o } else { i * d + (m - 2) * d * d + d * o };
            let expect = mlp(fv, d) + mlp(fe, d) + l * (mlp(3 * d, d) + mlp(d, d)) + 2 * mlp(d, 1);
            assert_eq!(cfg.param_count(), expect);
            assert_eq!(init_model(cfg).unwrap().param_count(), expect);
        }
        assert!(init_model(ModelConfig { latent_dim: 0, ..tiny_config(&g, 1, 1, 1) }).is_err());
    }

    #[test]
    fn zero_inputs_give_zero_latents_and_outputs() {
        let g = toy_graph(4, &[(0, 1), (1, 2), (2, 3), (0, 2)], 1.0);
        let s = init_model(tiny_config(&g, 6, 2, 2)).unwrap();
        let x = Array2::zeros((4, s.config.node_inputs));
        let e = Array2::zeros((4, s.config.edge_inputs));
        let (h, eps) = encode(&s, &g, &x, &e).unwrap();
        assert_eq!(h.dim(), (4, 6));
        assert_eq!(eps.dim(), (4, 6));
        assert!(h.iter().chain(eps.iter()).all(|v| *v == 0.0));
        let (h2, e2) = process_layer(&s, &g, 1, &h, &eps).unwrap();
        assert!(h2.iter().chain(e2.iter()).all(|v| *v == 0.0));
        let (v, q) = decode(&s, &g, &h2, &e2).unwrap();
        assert_eq!((v.len(), q.len()), (4, 4));
        assert!(v.iter().chain(&q).all(|z| *z == 0.0));
        assert!(encode(&s, &g, &Array2::zeros((3, s.config.node_inputs)), &e).is_err());
    }

    #[test]
    fn isolated_node_keeps_its_embedding() {
        // node 3 has no incident edges
        let g = toy_graph(4, &[(0, 1), (1, 2)], 1.0);
        let s = init_model(tiny_config(&g, 5, 1, 2)).unwrap();
        let h = random_inputs(4, 5, 1);
        let eps = random_inputs(2, 5, 2);
        let (h2, _) = process_layer(&s, &g, 0, &h, &eps).unwrap();
        assert_eq!(h2.row(3), h.row(3));
        // node 0 has only an outgoing edge: no incoming messages either
        assert_eq!(h2.row(0), h.row(0));
    }

    #[test]
    fn single_layer_encoder_is_linear() {
        let g = toy_graph(3, &[(0, 1), (1, 2)], 1.0);
        let s = init_model(tiny_config(&g, 4, 1, 1)).unwrap();
        let x = random_inputs(3, s.config.node_inputs, 3);
        let e = random_inputs(2, s.config.edge_inputs, 4);
        let (h, eps) = encode(&s, &g, &x, &e).unwrap();
        let (wn, we) = (&s.weights()[0], &s.weights()[1]);
        for r in 0..3 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..x.ncols() {
                    acc += x[[r, k]] * wn[[c, k]];
                }
                assert!((h[[r, c]] - acc).abs() < 1e-12);
            }
        }
        for r in 0..2 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..e.ncols() {
                    acc += e[[r, k]] * we[[c, k]];
                }
                assert!((eps[[r, c]] - acc).abs() < 1e-12);
            }
        }
        let (v, q) = decode(&s, &g, &h, &eps).unwrap();
        let n = s.weights().len();
        let (dn, de) = (&s.weights()[n - 2], &s.weights()[n - 1]);
        for r in 0..3 {
            let lin: f64 = (0..4).map(|c| h[[r, c]] * dn[[0, c]]).sum();
            assert!((v[r] - lin).abs() < 1e-12);
        }
        for r in 0..2 {
            let lin: f64 = (0..4).map(|c| eps[[r, c]] * de[[0, c]]).sum();
            assert!((q[r] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_layer_matches_hand_evaluation() {
        // d = 1, L_MLP = 1: message weights [a, b, c], update weight u.
        let g = toy_graph(2, &[(0, 1)], 1.0);
        let mut cfg = tiny_config(&g, 1, 1, 1);
        cfg.node_inputs = 1;
        cfg.edge_inputs = 1;
        let (a, b, c, u) = (0.5, -2.0, 3.0, 1.5);
        let w = vec![
            Array2::from_elem((1, 1), 1.0),
            Array2::from_elem((1, 1), 1.0),
            Array2::from_shape_vec((1, 3), vec![a, b, c]).unwrap(),
            Array2::from_elem((1, 1), u),
            Array2::from_elem((1, 1), 1.0),
            Array2::from_elem((1, 1), 1.0),
        ];
        let s = ModelState::from_weights(cfg.clone(), w.clone()).unwrap();
        let (h0, h1, e) = (0.7, -0.4, 0.2);
        let h = Array2::from_shape_vec((2, 1), vec![h0, h1]).unwrap();
        let eps = Array2::from_elem((1, 1), e);
        let (h2, e2) = process_layer(&s, &g, 0, &h, &eps).unwrap();
        let m = a * h1 + b * h0 + c * e; // m_01 = MLP(h_1 ‖ h_0 ‖ e_01)
        assert!((h2[[0, 0]] - h0).abs() < 1e-15);
        assert!((h2[[1, 0]] - (h1 + u * m)).abs() < 1e-15);
        assert!((e2[[0, 0]] - (e + m)).abs() < 1e-15);

        cfg.edge_update = EdgeUpdate::Overwrite;
        cfg.neighborhood = Neighborhood::Bidirectional;
        let s = ModelState::from_weights(cfg, w).unwrap();
        let (h2, e2) = process_layer(&s, &g, 0, &h, &eps).unwrap();
        let back = a * h0 + b * h1 + c * e;
        assert!((h2[[0, 0]] - (h0 + u * back)).abs() < 1e-15);
        assert!((e2[[0, 0]] - m).abs() < 1e-15);
    }

    #[test]
    fn relu_hidden_layers() {
        let g = toy_graph(2, &[(0, 1)], 1.0);
        let mut cfg = tiny_config(&g, 1, 1, 2);
        cfg.node_inputs = 1;
        cfg.edge_inputs = 1;
        let mut s = ModelState::zeros(cfg);
        for w in s.weights_mut() {
            w.fill(1.0);
        }
        s.weights_mut()[0].fill(-1.0);
        let x = Array2::from_shape_vec((2, 1), vec![2.0, -3.0]).unwrap();
        let e = Array2::from_elem((1, 1), 1.0);
        let (h, _) = encode(&s, &g, &x, &e).unwrap();
        // relu(-2) * 1 = 0 and relu(3) * 1 = 3
        assert_eq!(h.column(0).to_vec(), vec![0.0, 3.0]);
    }

    fn event_for(g: &FloodGraph, steps: usize, seed: u64) -> EventSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ev = EventSeries::zeros(g, steps, 60.0);
        ev.node_volume.mapv_inplace(|_| rng.gen_range(0.0..5.0));
        ev.edge_flow.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        ev.rainfall.mapv_inplace(|_| rng.gen_range(0.0..0.5));
        for v in ev.inflow_bc.iter_mut().chain(ev.outflow_bc.iter_mut()) {
            *v = rng.gen_range(0.0..2.0);
        }
        ev
    }

    #[test]
    fn forward_step_is_pure_and_denormalizes() {
        let g = generate_catchment(&CatchmentSpec {
            num_nodes: 12,
            seed: 1,
            ..CatchmentSpec::default()
        })
        .unwrap();
        let s = init_model(tiny_config(&g, 8, 2, 2)).unwrap();
        let ev = event_for(&g, 6, 2);
        let mut stats = NormStats::identity(s.config.node_inputs, s.config.edge_inputs);
        let a = forward_step(&s, &g, &ev, 3, &stats).unwrap();
        assert_eq!(a, forward_step(&s, &g, &ev, 3, &stats).unwrap());
        stats.delta_volume.mean = vec![2.0];
        stats.delta_volume.std = vec![10.0];
        let b = forward_step(&s, &g, &ev, 3, &stats).unwrap();
        for (x, y) in a.delta_volume.iter().zip(&b.delta_volume) {
            assert!((y - (x * 10.0 + 2.0)).abs() < 1e-9);
        }
        assert_eq!(a.delta_flow, b.delta_flow);
        assert!(forward_step(&s, &g, &ev, 1, &stats).is_err());
        let narrow = NormStats::identity(3, s.config.edge_inputs);
        assert!(matches!(forward_step(&s, &g, &ev, 3, &narrow), Err(FloodError::Schema(_))));
    }

    #[test]
    fn tape_window_matches_assembled_features() {
        use crate::dataset::{assemble_edge_features, assemble_node_features, fit_normalizer};
        let g = toy_graph(4, &[(0, 1), (1, 2), (2, 3)], 2.0);
        let ev = event_for(&g, 7, 4);
        for features in [FeatureConfig::default(), FeatureConfig { history: 1, boundary_channels: false }] {
            let stats = fit_normalizer(std::slice::from_ref(&ev), &g, features).unwrap();
            let tape = Tape::new();
            let hist = History::from_event(&tape, &ev, 0, 6);
            let (x, e) = window_on_tape(&tape, &g, &ev, 4, features, &stats, &hist).unwrap();
            let ox = stats.node.normalize(&assemble_node_features(&g, &ev, 4, features).unwrap()).unwrap();
            let oe = stats.edge.normalize(&assemble_edge_features(&g, &ev, 4, features).unwrap()).unwrap();
            for (a, b) in tape.value(x).iter().zip(ox.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (a, b) in tape.value(e).iter().zip(oe.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            assert!(window_on_tape(&tape, &g, &ev, 0, features, &stats, &hist).is_err());
        }
    }

    #[test]
    fn oracle_stub_returns_true_deltas() {
        let g = toy_graph(3, &[(0, 1), (1, 2)], 1.0);
        let ev = event_for(&g, 5, 3);
        let stub = OracleStub {
            truth: ev.clone(),
            features: FeatureConfig::default(),
        };
        let out = stub.predict(&g, &ev, 2).unwrap();
        for i in 0..3 {
            let want = f64::from(ev.node_volume[[3, i]]) - f64::from(ev.node_volume[[2, i]]);
            assert_eq!(out.delta_volume[i], want);
        }
        assert!(stub.predict(&g, &ev, 4).is_err());
    }

    #[test]
    fn sum_of_volume_change_gradient_matches_finite_differences() {
        let g = toy_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)], 1.0);
        let s = init_model(tiny_config(&g, 4, 2, 2)).unwrap();
        let x = random_inputs(5, s.config.node_inputs, 8);
        let e = random_inputs(5, s.config.edge_inputs, 9);
        let eval = |state: &ModelState| -> f64 {
            let tape = Tape::new();
            let m = state.on_tape_frozen(&tape);
            let (v, _) = m.forward(&tape, &g, tape.constant(x.clone()), tape.constant(e.clone()));
            tape.scalar(tape.sum(v))
        };
        let tape = Tape::new();
        let m = s.on_tape(&tape);
        let (v, _) = m.forward(&tape, &g, tape.constant(x.clone()), tape.constant(e.clone()));
        let grads = tape.backward(tape.sum(v));
        let h = 1e-5;
        for (k, var) in m.vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            for idx in [(0, 0), (analytic.nrows() - 1, analytic.ncols() - 1)] {
                let mut plus = s.clone();
                plus.weights_mut()[k][idx] += h;
                let mut minus = s.clone();
                minus.weights_mut()[k][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
                assert!(rel <= 1e-4, "{} {idx:?}: {a} vs {fd}", s.param_names()[k]);
            }
        }
    }
}
