//! Flood events, feature-window assembly, and z-score normalization.
//!
//! A node feature window at timestep `t` with history `p` is laid out as
//!
//! ```text
//! [ static node columns | D(t-p) | D(t-p+1) | ... | D(t) ]
//! ```
//!
//! where each dynamic block `D(s)` is `[V(s), R(s), Q_in(s), Q_out(s)]`
//! (the two boundary channels are broadcast to every node and can be
//! switched off). Edge windows are `[static edge columns | Q(t-p) | ... | Q(t)]`.
//! [`node_layout`] and [`edge_layout`] are the single source of truth for
//! this ordering.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::graph::FloodGraph;

/// Lower bound applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// One flood event on a fixed catchment graph.
///
/// Row `t` of every matrix is the state (or forcing) at timestep `t`.
/// Rainfall and the boundary series at row `t` describe the interval
/// `t -> t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSeries {
    /// Timestep length in seconds.
    pub dt: f64,
    /// Node volumes (m³), `(T+1) × |V|`.
    pub node_volume: Array2<f32>,
    /// Signed edge flows (m³/s), `(T+1) × |E|`.
    pub edge_flow: Array2<f32>,
    /// Rainfall volume added per node during each step (m³/step), `(T+1) × |V|`.
    pub rainfall: Array2<f32>,
    /// Global boundary inflow (m³/s), length `T+1`.
    pub inflow_bc: Vec<f32>,
    /// Global boundary outflow (m³/s), length `T+1`.
    pub outflow_bc: Vec<f32>,
}

impl EventSeries {
    pub fn num_steps(&self) -> usize {
        self.node_volume.nrows()
    }

    /// All-zero event with `num_steps` states.
    pub fn zeros(graph: &FloodGraph, num_steps: usize, dt: f64) -> Self {
        Self {
            dt,
            node_volume: Array2::zeros((num_steps, graph.num_nodes())),
            edge_flow: Array2::zeros((num_steps, graph.num_edges())),
            rainfall: Array2::zeros((num_steps, graph.num_nodes())),
            inflow_bc: vec![0.0; num_steps],
            outflow_bc: vec![0.0; num_steps],
        }
    }

    /// Checks shapes against `graph` plus finiteness and sign constraints.
    pub fn validate(&self, graph: &FloodGraph) -> Result<()> {
        let steps = self.num_steps();
        let shape_err = |what: &str, found: (usize, usize), want: (usize, usize)| {
            FloodError::Shape(format!("{what} is {found:?}, expected {want:?}"))
        };
        let n = graph.num_nodes();
        let e = graph.num_edges();
        if self.node_volume.dim() != (steps, n) {
            return Err(shape_err("node_volume", self.node_volume.dim(), (steps, n)));
        }
        if self.edge_flow.dim() != (steps, e) {
            return Err(shape_err("edge_flow", self.edge_flow.dim(), (steps, e)));
        }
        if self.rainfall.dim() != (steps, n) {
            return Err(shape_err("rainfall", self.rainfall.dim(), (steps, n)));
        }
        if self.inflow_bc.len() != steps || self.outflow_bc.len() != steps {
            return Err(FloodError::Shape(format!(
                "boundary series lengths {}/{} differ from {steps} steps",
                self.inflow_bc.len(),
                self.outflow_bc.len()
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(FloodError::InvalidInput(format!("dt = {}", self.dt)));
        }
        let all_finite = self
            .node_volume
            .iter()
            .chain(self.edge_flow.iter())
            .chain(self.rainfall.iter())
            .chain(&self.inflow_bc)
            .chain(&self.outflow_bc)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(FloodError::InvalidInput("event contains non-finite values".into()));
        }
        let non_negative = self
            .node_volume
            .iter()
            .chain(self.rainfall.iter())
            .chain(&self.inflow_bc)
            .chain(&self.outflow_bc)
            .all(|v| *v >= 0.0);
        if !non_negative {
            return Err(FloodError::InvalidInput(
                "volumes, rainfall, and boundary flows must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Which dynamic channels enter the feature windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Number of previous states `p` appended besides the current one.
    pub history: usize,
    /// Broadcast `Q_in`/`Q_out` to every node as dynamic channels.
    pub boundary_channels: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            history: 2,
            boundary_channels: true,
        }
    }
}

/// Meaning of one node-window column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeColumn {
    Static(usize),
    /// `lag` counts back from the current step: 0 is `t`, `p` is `t-p`.
    Volume { lag: usize },
    Rainfall { lag: usize },
    Inflow { lag: usize },
    Outflow { lag: usize },
}

/// Meaning of one edge-window column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeColumn {
    Static(usize),
    Flow { lag: usize },
}

pub fn node_layout(static_cols: usize, cfg: FeatureConfig) -> Vec<NodeColumn> {
    let mut cols: Vec<_> = (0..static_cols).map(NodeColumn::Static).collect();
    for lag in (0..=cfg.history).rev() {
        cols.push(NodeColumn::Volume { lag });
        cols.push(NodeColumn::Rainfall { lag });
        if cfg.boundary_channels {
            cols.push(NodeColumn::Inflow { lag });
            cols.push(NodeColumn::Outflow { lag });
        }
    }
    cols
}

pub fn edge_layout(static_cols: usize, cfg: FeatureConfig) -> Vec<EdgeColumn> {
    let mut cols: Vec<_> = (0..static_cols).map(EdgeColumn::Static).collect();
    for lag in (0..=cfg.history).rev() {
        cols.push(EdgeColumn::Flow { lag });
    }
    cols
}

/// Human-readable column names, e.g. `volume[t-2]`.
pub fn node_column_names(graph: &FloodGraph, cfg: FeatureConfig) -> Vec<String> {
    let lagged = |name: &str, lag: usize| {
        if lag == 0 {
            format!("{name}[t]")
        } else {
            format!("{name}[t-{lag}]")
        }
    };
    node_layout(graph.static_node_features().ncols(), cfg)
        .into_iter()
        .map(|c| match c {
            NodeColumn::Static(i) => graph.node_feature_names()[i].clone(),
            NodeColumn::Volume { lag } => lagged("volume_m3", lag),
            NodeColumn::Rainfall { lag } => lagged("rainfall_m3", lag),
            NodeColumn::Inflow { lag } => lagged("inflow_bc_m3s", lag),
            NodeColumn::Outflow { lag } => lagged("outflow_bc_m3s", lag),
        })
        .collect()
}

pub fn edge_column_names(graph: &FloodGraph, cfg: FeatureConfig) -> Vec<String> {
    edge_layout(graph.static_edge_features().ncols(), cfg)
        .into_iter()
        .map(|c| match c {
            EdgeColumn::Static(i) => graph.edge_feature_names()[i].clone(),
            EdgeColumn::Flow { lag: 0 } => "flow_m3s[t]".to_string(),
            EdgeColumn::Flow { lag } => format!("flow_m3s[t-{lag}]"),
        })
        .collect()
}

fn check_window(event: &EventSeries, t: usize, p: usize) -> Result<()> {
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
    Ok(())
}

/// Value of node column `col` at node `i` for the window ending at `t`.
fn node_value(graph: &FloodGraph, event: &EventSeries, t: usize, col: NodeColumn, i: usize) -> f64 {
    let v = match col {
        NodeColumn::Static(c) => graph.static_node_features()[[i, c]],
        NodeColumn::Volume { lag } => event.node_volume[[t - lag, i]],
        NodeColumn::Rainfall { lag } => event.rainfall[[t - lag, i]],
        NodeColumn::Inflow { lag } => event.inflow_bc[t - lag],
        NodeColumn::Outflow { lag } => event.outflow_bc[t - lag],
    };
    f64::from(v)
}

fn edge_value(graph: &FloodGraph, event: &EventSeries, t: usize, col: EdgeColumn, k: usize) -> f64 {
    let v = match col {
        EdgeColumn::Static(c) => graph.static_edge_features()[[k, c]],
        EdgeColumn::Flow { lag } => event.edge_flow[[t - lag, k]],
    };
    f64::from(v)
}

/// Node feature window `X^t` in physical units, `|V| × f_v`.
pub fn assemble_node_features(
    graph: &FloodGraph,
    event: &EventSeries,
    t: usize,
    cfg: FeatureConfig,
) -> Result<Array2<f64>> {
    check_window(event, t, cfg.history)?;
    let layout = node_layout(graph.static_node_features().ncols(), cfg);
    Ok(Array2::from_shape_fn(
        (graph.num_nodes(), layout.len()),
        |(i, c)| node_value(graph, event, t, layout[c], i),
    ))
}

/// Edge feature window `E^t` in physical units, `|E| × f_e`.
pub fn assemble_edge_features(
    graph: &FloodGraph,
    event: &EventSeries,
    t: usize,
    cfg: FeatureConfig,
) -> Result<Array2<f64>> {
    check_window(event, t, cfg.history)?;
    let layout = edge_layout(graph.static_edge_features().ncols(), cfg);
    Ok(Array2::from_shape_fn(
        (graph.num_edges(), layout.len()),
        |(k, c)| edge_value(graph, event, t, layout[c], k),
    ))
}

/// Per-column mean and (floored) population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Zero mean, unit deviation for `cols` columns.
    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.width() {
            return Err(FloodError::Shape(format!(
                "matrix has {} columns, statistics cover {}",
                x.ncols(),
                self.width()
            )));
        }
        Ok(())
    }

    /// `(x - mean) / std` per column.
    pub fn normalize(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }

    /// `x̂ * std + mean` per column.
    pub fn denormalize(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        Ok(out)
    }
}

/// Welford accumulator for a single column.
#[derive(Clone, Copy, Default)]
struct Running {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn finish(&self) -> (f64, f64) {
        if self.count == 0 {
            return (0.0, 1.0);
        }
        let var = self.m2 / self.count as f64;
        (self.mean, var.sqrt().max(STD_FLOOR))
    }
}

fn collect(acc: &[Running]) -> ColumnStats {
    let (mean, std) = acc.iter().map(Running::finish).unzip();
    ColumnStats { mean, std }
}

/// Normalization statistics for inputs and one-step targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub node: ColumnStats,
    pub edge: ColumnStats,
    pub delta_volume: ColumnStats,
    pub delta_flow: ColumnStats,
}

impl NormStats {
    /// Statistics that leave every quantity unchanged.
    pub fn identity(node_cols: usize, edge_cols: usize) -> Self {
        Self {
            node: ColumnStats::identity(node_cols),
            edge: ColumnStats::identity(edge_cols),
            delta_volume: ColumnStats::identity(1),
            delta_flow: ColumnStats::identity(1),
        }
    }
}

/// Fits per-column statistics over every window `t ∈ [p, T)` of the given
/// (training) events and over every one-step target delta of those windows.
pub fn fit_normalizer(
    events: &[EventSeries],
    graph: &FloodGraph,
    cfg: FeatureConfig,
) -> Result<NormStats> {
    if events.is_empty() {
        return Err(FloodError::InvalidInput(
            "cannot fit normalization on zero events".into(),
        ));
    }
    let nodes = node_layout(graph.static_node_features().ncols(), cfg);
    let edges = edge_layout(graph.static_edge_features().ncols(), cfg);
    let mut node_acc = vec![Running::default(); nodes.len()];
    let mut edge_acc = vec![Running::default(); edges.len()];
    let mut dv = Running::default();
    let mut dq = Running::default();
    for event in events {
        event.validate(graph)?;
        for t in cfg.history..event.num_steps().saturating_sub(1) {
            for (c, col) in nodes.iter().enumerate() {
                for i in 0..graph.num_nodes() {
                    node_acc[c].push(node_value(graph, event, t, *col, i));
                }
            }
            for (c, col) in edges.iter().enumerate() {
                for k in 0..graph.num_edges() {
                    edge_acc[c].push(edge_value(graph, event, t, *col, k));
                }
            }
            for i in 0..graph.num_nodes() {
                dv.push(f64::from(event.node_volume[[t + 1, i]]) - f64::from(event.node_volume[[t, i]]));
            }
            for k in 0..graph.num_edges() {
                dq.push(f64::from(event.edge_flow[[t + 1, k]]) - f64::from(event.edge_flow[[t, k]]));
            }
        }
    }
    if dv.count == 0 {
        return Err(FloodError::InvalidInput(format!(
            "events are too short for history {}",
            cfg.history
        )));
    }
    Ok(NormStats {
        node: collect(&node_acc),
        edge: collect(&edge_acc),
        delta_volume: collect(&[dv]),
        delta_flow: collect(&[dq]),
    })
}
