//! Static catchment topology and directed-flux bookkeeping.
//!
//! Edges are stored in COO form as parallel `src`/`dst` index arrays. A
//! positive flow on edge `k` moves water from `src[k]` to `dst[k]`; a
//! negative flow moves it the other way.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::tape::{Tape, Var};

pub const NODE_AREA: &str = "cell_area_m2";
pub const NODE_ELEVATION: &str = "bed_elevation_m";
pub const EDGE_FACE_LENGTH: &str = "face_length_m";
pub const EDGE_DISTANCE: &str = "centroid_distance_m";
pub const EDGE_ELEVATION_DROP: &str = "elevation_difference_m";

/// Monotone piecewise-linear volume (m³) to depth (m) curve.
///
/// Beyond the last breakpoint the final segment is extrapolated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCurve {
    volumes: Vec<f32>,
    depths: Vec<f32>,
}

impl DepthCurve {
    pub fn new(volumes: Vec<f32>, depths: Vec<f32>) -> Result<Self> {
        let curve = Self { volumes, depths };
        if let Some(reason) = curve.defect() {
            return Err(FloodError::InvalidInput(format!("depth curve: {reason}")));
        }
        Ok(curve)
    }

    /// Vertical-walled cell: depth = volume / area.
    pub fn prism(area: f32) -> Self {
        Self {
            volumes: vec![0.0, area],
            depths: vec![0.0, 1.0],
        }
    }

    pub fn volumes(&self) -> &[f32] {
        &self.volumes
    }

    pub fn depths(&self) -> &[f32] {
        &self.depths
    }

    fn defect(&self) -> Option<String> {
        if self.volumes.len() != self.depths.len() {
            return Some("breakpoint arrays differ in length".into());
        }
        if self.volumes.len() < 2 {
            return Some("needs at least two breakpoints".into());
        }
        if self.volumes[0] != 0.0 || self.depths[0] != 0.0 {
            return Some("must map 0 to 0".into());
        }
        for w in self.volumes.windows(2) {
            if !(w[1] > w[0]) {
                return Some("volumes must be strictly increasing".into());
            }
        }
        for w in self.depths.windows(2) {
            if w[1] < w[0] {
                return Some("depths must be non-decreasing".into());
            }
        }
        None
    }

    pub fn is_valid(&self) -> bool {
        self.defect().is_none()
    }

    /// Depth at `volume`; negative volumes map to zero depth.
    pub fn depth(&self, volume: f64) -> f64 {
        if volume <= 0.0 {
            return 0.0;
        }
        let n = self.volumes.len();
        let seg = match self
            .volumes
            .iter()
            .position(|&v| f64::from(v) >= volume)
        {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let (v0, v1) = (f64::from(self.volumes[seg]), f64::from(self.volumes[seg + 1]));
        let (d0, d1) = (f64::from(self.depths[seg]), f64::from(self.depths[seg + 1]));
        d0 + (d1 - d0) * (volume - v0) / (v1 - v0)
    }
}

/// A single broken graph invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EndpointOutOfRange { edge: usize, node: usize },
    SelfLoop { node: usize },
    DuplicateEdge { src: usize, dst: usize },
    EmptyInflow,
    EmptyOutflow,
    BoundaryOverlap { node: usize },
    BoundaryOutOfRange { node: usize },
    DepthCurve { node: usize, reason: String },
    NonPositiveArea { node: usize },
    MissingAreaColumn,
    FeatureRows { what: &'static str, expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EndpointOutOfRange { edge, node } => {
                write!(f, "endpoint out of range: edge {edge} references node {node}")
            }
            Violation::SelfLoop { node } => write!(f, "self-loop at node {node}"),
            Violation::DuplicateEdge { src, dst } => {
                write!(f, "duplicate directed edge ({src},{dst})")
            }
            Violation::EmptyInflow => write!(f, "no inflow nodes"),
            Violation::EmptyOutflow => write!(f, "no outflow nodes"),
            Violation::BoundaryOverlap { node } => {
                write!(f, "node {node} is both inflow and outflow")
            }
            Violation::BoundaryOutOfRange { node } => {
                write!(f, "boundary node {node} out of range")
            }
            Violation::DepthCurve { node, reason } => {
                write!(f, "depth curve at node {node}: {reason}")
            }
            Violation::NonPositiveArea { node } => write!(f, "non-positive cell area at node {node}"),
            Violation::MissingAreaColumn => write!(f, "static node features lack `{NODE_AREA}`"),
            Violation::FeatureRows {
                what,
                expected,
                found,
            } => write!(f, "{what} has {found} rows, expected {expected}"),
        }
    }
}

/// Outcome of [`validate_graph`]; an empty violation list means valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// Raw pieces of a catchment graph, before validation.
#[derive(Clone, Debug)]
pub struct GraphParts {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub static_node_features: Array2<f32>,
    pub node_feature_names: Vec<String>,
    pub static_edge_features: Array2<f32>,
    pub edge_feature_names: Vec<String>,
    pub inflow_nodes: Vec<usize>,
    pub outflow_nodes: Vec<usize>,
    pub depth_curves: Vec<DepthCurve>,
    /// Cell centroids (x, y) in metres; used only for plotting.
    pub positions: Option<Array2<f32>>,
}

/// Immutable catchment graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FloodGraph {
    num_nodes: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    static_node_features: Array2<f32>,
    node_feature_names: Vec<String>,
    static_edge_features: Array2<f32>,
    edge_feature_names: Vec<String>,
    inflow_nodes: Vec<usize>,
    outflow_nodes: Vec<usize>,
    depth_curves: Vec<DepthCurve>,
    positions: Option<Array2<f32>>,
}

impl FloodGraph {
    /// Builds a graph and rejects it if any invariant is broken.
    pub fn new(parts: GraphParts) -> Result<Self> {
        let graph = Self::new_unchecked(parts);
        let report = validate_graph(&graph);
        if !report.is_valid() {
            return Err(FloodError::InvalidInput(format!(
                "invalid graph: {}",
                report.messages().join("; ")
            )));
        }
        Ok(graph)
    }

    /// Builds a graph without checking invariants (see [`validate_graph`]).
    pub fn new_unchecked(parts: GraphParts) -> Self {
        let (src, dst): (Vec<usize>, Vec<usize>) = parts.edges.into_iter().unzip();
        Self {
            num_nodes: parts.num_nodes,
            src: src.into(),
            dst: dst.into(),
            static_node_features: parts.static_node_features,
            node_feature_names: parts.node_feature_names,
            static_edge_features: parts.static_edge_features,
            edge_feature_names: parts.edge_feature_names,
            inflow_nodes: parts.inflow_nodes,
            outflow_nodes: parts.outflow_nodes,
            depth_curves: parts.depth_curves,
            positions: parts.positions,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn src(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn dst(&self) -> &Arc<[usize]> {
        &self.dst
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    pub fn static_node_features(&self) -> &Array2<f32> {
        &self.static_node_features
    }

    pub fn node_feature_names(&self) -> &[String] {
        &self.node_feature_names
    }

    pub fn static_edge_features(&self) -> &Array2<f32> {
        &self.static_edge_features
    }

    pub fn edge_feature_names(&self) -> &[String] {
        &self.edge_feature_names
    }

    pub fn inflow_nodes(&self) -> &[usize] {
        &self.inflow_nodes
    }

    pub fn outflow_nodes(&self) -> &[usize] {
        &self.outflow_nodes
    }

    pub fn depth_curves(&self) -> &[DepthCurve] {
        &self.depth_curves
    }

    pub fn positions(&self) -> Option<&Array2<f32>> {
        self.positions.as_ref()
    }

    fn node_column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.node_feature_names.iter().position(|n| n == name)?;
        Some(
            self.static_node_features
                .column(c)
                .iter()
                .map(|&v| f64::from(v))
                .collect(),
        )
    }

    /// Cell areas (m²), if the area column is present.
    pub fn cell_areas(&self) -> Option<Vec<f64>> {
        self.node_column(NODE_AREA)
    }

    /// Bed elevations (m), if the elevation column is present.
    pub fn bed_elevations(&self) -> Option<Vec<f64>> {
        self.node_column(NODE_ELEVATION)
    }

    /// Per-node external boundary flux `b_i` (m³/s): the global inflow split
    /// evenly over inflow nodes and the global outflow drained evenly from
    /// outflow nodes.
    pub fn boundary_flux(&self, inflow: f64, outflow: f64) -> Vec<f64> {
        let mut b = vec![0.0; self.num_nodes];
        let share_in = inflow / self.inflow_nodes.len().max(1) as f64;
        let share_out = outflow / self.outflow_nodes.len().max(1) as f64;
        for &i in &self.inflow_nodes {
            b[i] += share_in;
        }
        for &i in &self.outflow_nodes {
            b[i] -= share_out;
        }
        b
    }

    /// True for nodes designated inflow or outflow.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_nodes];
        for &i in self.inflow_nodes.iter().chain(&self.outflow_nodes) {
            mask[i] = true;
        }
        mask
    }

    /// Hop distance from `from` to every node ignoring edge direction;
    /// `None` for unreachable nodes.
    pub fn hop_distances(&self, from: usize) -> Vec<Option<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for (s, d) in self.edges() {
            adj[s].push(d);
            adj[d].push(s);
        }
        let mut dist = vec![None; self.num_nodes];
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("visited");
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Whether every node is reachable from node 0 ignoring direction.
    pub fn is_connected(&self) -> bool {
        self.num_nodes == 0 || self.hop_distances(0).iter().all(Option::is_some)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`; edge order is
    /// kept.
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_nodes, "permutation length");
        let mut inverse = vec![0; perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            inverse[new] = old;
        }
        let node_rows = |a: &Array2<f32>| {
            let mut out = a.clone();
            for new in 0..perm.len() {
                out.row_mut(new).assign(&a.row(inverse[new]));
            }
            out
        };
        Self {
            num_nodes: self.num_nodes,
            src: self.src.iter().map(|&s| perm[s]).collect::<Vec<_>>().into(),
            dst: self.dst.iter().map(|&d| perm[d]).collect::<Vec<_>>().into(),
            static_node_features: node_rows(&self.static_node_features),
            node_feature_names: self.node_feature_names.clone(),
            static_edge_features: self.static_edge_features.clone(),
            edge_feature_names: self.edge_feature_names.clone(),
            inflow_nodes: self.inflow_nodes.iter().map(|&i| perm[i]).collect(),
            outflow_nodes: self.outflow_nodes.iter().map(|&i| perm[i]).collect(),
            depth_curves: inverse.iter().map(|&o| self.depth_curves[o].clone()).collect(),
            positions: self.positions.as_ref().map(node_rows),
        }
    }
}

/// Lists every broken invariant of `graph`.
pub fn validate_graph(graph: &FloodGraph) -> ValidationReport {
    let n = graph.num_nodes;
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for (k, (s, d)) in graph.edges().enumerate() {
        let mut in_range = true;
        for node in [s, d] {
            if node >= n {
                violations.push(Violation::EndpointOutOfRange { edge: k, node });
                in_range = false;
            }
        }
        if s == d && in_range {
            violations.push(Violation::SelfLoop { node: s });
        }
        if !seen.insert((s, d)) {
            violations.push(Violation::DuplicateEdge { src: s, dst: d });
        }
    }

    if graph.inflow_nodes.is_empty() {
        violations.push(Violation::EmptyInflow);
    }
    if graph.outflow_nodes.is_empty() {
        violations.push(Violation::EmptyOutflow);
    }
    for &i in graph.inflow_nodes.iter().chain(&graph.outflow_nodes) {
        if i >= n {
            violations.push(Violation::BoundaryOutOfRange { node: i });
        }
    }
    let inflow: HashSet<_> = graph.inflow_nodes.iter().collect();
    for i in &graph.outflow_nodes {
        if inflow.contains(i) {
            violations.push(Violation::BoundaryOverlap { node: *i });
        }
    }

    if graph.static_node_features.nrows() != n {
        violations.push(Violation::FeatureRows {
            what: "static node features",
            expected: n,
            found: graph.static_node_features.nrows(),
        });
    }
    if graph.static_edge_features.nrows() != graph.num_edges() {
        violations.push(Violation::FeatureRows {
            what: "static edge features",
            expected: graph.num_edges(),
            found: graph.static_edge_features.nrows(),
        });
    }
    if graph.depth_curves.len() != n {
        violations.push(Violation::FeatureRows {
            what: "depth curves",
            expected: n,
            found: graph.depth_curves.len(),
        });
    }
    for (i, curve) in graph.depth_curves.iter().enumerate() {
        if let Some(reason) = curve.defect() {
            violations.push(Violation::DepthCurve { node: i, reason });
        }
    }
    match graph.cell_areas() {
        None => violations.push(Violation::MissingAreaColumn),
        Some(areas) => {
            for (i, a) in areas.iter().enumerate() {
                if !(*a > 0.0) {
                    violations.push(Violation::NonPositiveArea { node: i });
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Per-node inflow and outflow (m³/s) induced by signed edge flows.
///
/// The edge list is doubled with its transpose and each copy is weighted by
/// the positive part of the flow along its own orientation, so every edge
/// contributes `|Q_k|` once to the inflow of its receiving node and once to
/// the outflow of its donor node.
pub fn compute_node_fluxes(graph: &FloodGraph, edge_flow: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if edge_flow.len() != graph.num_edges() {
        return Err(FloodError::Shape(format!(
            "edge flow has {} entries, graph has {} edges",
            edge_flow.len(),
            graph.num_edges()
        )));
    }
    if let Some(k) = edge_flow.iter().position(|q| !q.is_finite()) {
        return Err(FloodError::InvalidInput(format!(
            "non-finite flow on edge {k}"
        )));
    }
    let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
    let mut inflow = vec![0.0; graph.num_nodes];
    let mut outflow = vec![0.0; graph.num_nodes];
    // Both directed copies of edge k are visited together, so each node sees
    // its contributions in edge order regardless of flow signs.
    for (k, &q) in edge_flow.iter().enumerate() {
        let (s, d) = (graph.src[k], graph.dst[k]);
        let along = relu(q);
        let against = relu(-q);
        inflow[d] += along;
        outflow[s] += along;
        inflow[s] += against;
        outflow[d] += against;
    }
    Ok((inflow, outflow))
}

/// Differentiable counterpart of [`compute_node_fluxes`] for an `|E|×1`
/// flow column on `tape`. Returns `(inflow, outflow)` as `|V|×1` columns.
pub fn node_fluxes_on_tape(tape: &Tape, graph: &FloodGraph, edge_flow: Var) -> (Var, Var) {
    let n = graph.num_nodes;
    let forward = tape.relu(edge_flow);
    let backward = tape.relu(tape.neg(edge_flow));
    let inflow = tape.add(
        tape.scatter_add_rows(forward, graph.dst.clone(), n),
        tape.scatter_add_rows(backward, graph.src.clone(), n),
    );
    let outflow = tape.add(
        tape.scatter_add_rows(forward, graph.src.clone(), n),
        tape.scatter_add_rows(backward, graph.dst.clone(), n),
    );
    (inflow, outflow)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Small graph with prism cells of the given area, node 0 inflow and the
    /// last node outflow.
    pub fn toy_graph(num_nodes: usize, edges: &[(usize, usize)], area: f32) -> FloodGraph {
        let node = Array2::from_shape_fn((num_nodes, 2), |(i, c)| {
            if c == 0 {
                area
            } else {
                (num_nodes - i) as f32
            }
        });
        let edge = Array2::from_shape_fn((edges.len(), 3), |(k, c)| (k + c) as f32 * 0.5 + 1.0);
        FloodGraph::new_unchecked(GraphParts {
            num_nodes,
            edges: edges.to_vec(),
            static_node_features: node,
            node_feature_names: vec![NODE_AREA.into(), NODE_ELEVATION.into()],
            static_edge_features: edge,
            edge_feature_names: vec![
                EDGE_FACE_LENGTH.into(),
                EDGE_DISTANCE.into(),
                EDGE_ELEVATION_DROP.into(),
            ],
            inflow_nodes: vec![0],
            outflow_nodes: vec![num_nodes - 1],
            depth_curves: vec![DepthCurve::prism(area); num_nodes],
            positions: None,
        })
    }
}
