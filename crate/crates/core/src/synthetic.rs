//! Synthetic catchments and mass-conserving flood events.
//!
//! Catchments are built from a seeded point set in a rectangular valley: a
//! Euclidean spanning tree guarantees connectivity, then the shortest
//! non-crossing proximity edges are added until the edge budget is met.
//! Bed elevation falls along the valley axis and towards a meandering
//! channel, and every edge is oriented downhill.
//!
//! Events are produced by explicit storage routing. Each routing substep
//! moves water between neighbours with a head-difference law, injects the
//! boundary inflow and rainfall, and drains the outlet through a linear
//! rating curve. The recorded series are integrals over those substeps, so
//! the per-node balance closes to rounding error by construction.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EventSeries;
use crate::error::{FloodError, Result};
use crate::graph::{
    DepthCurve, FloodGraph, GraphParts, EDGE_DISTANCE, EDGE_ELEVATION_DROP, EDGE_FACE_LENGTH,
    NODE_AREA, NODE_ELEVATION,
};
use crate::losses::{global_residual, local_residuals, StepForcing};

/// Node and edge counts of the reference mesh the defaults are scaled to.
pub const REFERENCE_NODES: usize = 1129;
pub const REFERENCE_EDGES: usize = 2743;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatchmentSpec {
    pub num_nodes: usize,
    /// Defaults to the reference edge/node ratio; the default is a best
    /// effort on tiny graphs whose hull admits fewer edges.
    pub num_edges: Option<usize>,
    /// `[width, height]` in metres. Defaults to a 2:1 valley holding
    /// `num_nodes` cells of `mean_cell_area`.
    pub extent: Option<[f64; 2]>,
    pub mean_cell_area: f64,
    /// Elevation drop (m) from the upstream corner to the outlet. Defaults
    /// to a fixed valley gradient, so a smaller catchment is a flatter
    /// piece of the same landscape rather than a steeper one.
    pub relief: Option<f64>,
    /// Fraction of the valley half-width occupied by the incised channel.
    pub channel_fraction: f64,
    /// Channel incision depth (m).
    pub channel_depth: f64,
    pub seed: u64,
}

impl Default for CatchmentSpec {
    fn default() -> Self {
        Self {
            num_nodes: REFERENCE_NODES,
            num_edges: None,
            extent: None,
            mean_cell_area: 1800.0,
            relief: None,
            channel_fraction: 0.2,
            channel_depth: 1.0,
            seed: 0,
        }
    }
}

impl CatchmentSpec {
    pub fn target_edges(&self) -> usize {
        self.num_edges.unwrap_or_else(|| {
            let scaled = self.num_nodes as f64 * REFERENCE_EDGES as f64 / REFERENCE_NODES as f64;
            (scaled.round() as usize).min((3 * self.num_nodes).saturating_sub(6))
        })
    }

    pub fn resolved_extent(&self) -> [f64; 2] {
        self.extent.unwrap_or_else(|| {
            let total = self.num_nodes as f64 * self.mean_cell_area;
            let width = (2.0 * total).sqrt();
            [width, width / 2.0]
        })
    }

    /// Relief in metres: 10 m over the default 1129-cell valley length.
    pub fn resolved_relief(&self) -> f64 {
        self.relief.unwrap_or_else(|| {
            let reference = (2.0 * REFERENCE_NODES as f64 * self.mean_cell_area).sqrt();
            10.0 * self.resolved_extent()[0] / reference
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if n < 4 {
            return Err(FloodError::Config(format!("num_nodes = {n}, need at least 4")));
        }
        let e = self.target_edges();
        if e < n - 1 {
            return Err(FloodError::Config(format!(
                "{e} edges cannot connect {n} nodes (need {})",
                n - 1
            )));
        }
        if e > 3 * n - 6 {
            return Err(FloodError::Config(format!(
                "{e} edges exceed the planar maximum {} for {n} nodes",
                3 * n - 6
            )));
        }
        let [w, h] = self.resolved_extent();
        let positive = [w, h, self.mean_cell_area];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(FloodError::Config("extent and cell area must be positive".into()));
        }
        let non_negative = [self.resolved_relief(), self.channel_fraction, self.channel_depth];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(FloodError::Config(
                "relief, channel fraction, and channel depth must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Forcing and routing parameters of one event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HydrographSpec {
    /// Number of recorded states `T+1`.
    pub num_steps: usize,
    pub dt: f64,
    /// Boundary inflow before and after the flood wave (m³/s).
    pub base_inflow: f64,
    pub peak_inflow: f64,
    /// Peak time as a fraction of the event duration.
    pub peak_time: f64,
    /// Gamma-type hydrograph shape; larger is sharper.
    pub shape: f64,
    /// Peak rainfall intensity (mm/h).
    pub rain_peak: f64,
    /// Rainfall centre and spread as fractions of the event duration.
    pub rain_time: f64,
    pub rain_width: f64,
    /// Relative amplitude of the spatial rainfall pattern, in `[0, 1]`.
    pub rain_variability: f64,
    /// Uniform initial water depth (m).
    pub initial_depth: f64,
    /// Head-difference conveyance coefficient (m^(1/3)/s).
    pub conveyance: f64,
    /// Outlet rating-curve coefficient (1/s).
    pub drain_rate: f64,
    /// Fraction of the explicit stability limit used per substep.
    pub courant: f64,
    /// Substep budget per recorded step.
    pub max_substeps: usize,
    pub seed: u64,
}

impl Default for HydrographSpec {
    fn default() -> Self {
        Self {
            num_steps: 576,
            dt: 900.0,
            base_inflow: 2.0,
            peak_inflow: 20.0,
            peak_time: 0.3,
            shape: 4.0,
            rain_peak: 6.0,
            rain_time: 0.25,
            rain_width: 0.08,
            rain_variability: 0.3,
            initial_depth: 0.0,
            conveyance: 10.0,
            drain_rate: 0.02,
            courant: 0.9,
            max_substeps: 200_000,
            seed: 0,
        }
    }
}

impl HydrographSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 2 {
            return Err(FloodError::Config(format!(
                "event needs at least 2 steps, got {}",
                self.num_steps
            )));
        }
        let non_negative = [
            self.base_inflow,
            self.peak_inflow,
            self.peak_time,
            self.shape,
            self.rain_peak,
            self.rain_time,
            self.rain_width,
            self.rain_variability,
            self.initial_depth,
            self.conveyance,
            self.drain_rate,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(FloodError::Config(format!(
                "hydrograph magnitudes must be finite and non-negative: {self:?}"
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(FloodError::Config(format!("dt = {}", self.dt)));
        }
        if !(self.courant > 0.0 && self.courant <= 1.0) {
            return Err(FloodError::Config(format!("courant = {}", self.courant)));
        }
        if self.rain_variability > 1.0 {
            return Err(FloodError::Config("rain_variability must not exceed 1".into()));
        }
        if self.max_substeps == 0 {
            return Err(FloodError::Config("max_substeps must be positive".into()));
        }
        Ok(())
    }

    /// A jittered copy for event `index` of a dataset: peak magnitudes,
    /// timings and the rainfall pattern vary around `self`.
    pub fn perturbed(&self, seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut out = self.clone();
        out.peak_inflow = self.peak_inflow * rng.gen_range(0.4..1.6);
        out.peak_time = (self.peak_time * rng.gen_range(0.7..1.3)).min(0.9);
        out.shape = self.shape * rng.gen_range(0.75..1.5);
        out.rain_peak = self.rain_peak * rng.gen_range(0.0..1.5);
        out.rain_time = (self.rain_time * rng.gen_range(0.6..1.4)).min(0.9);
        out.seed = rng.gen();
        out
    }

    /// Boundary inflow (m³/s) at time `s` seconds after the event start.
    pub fn inflow_at(&self, s: f64) -> f64 {
        let tp = self.peak_time * self.duration();
        let excess = (self.peak_inflow - self.base_inflow).max(0.0);
        if tp <= 0.0 || excess == 0.0 {
            return self.base_inflow;
        }
        let r = s / tp;
        let pulse = if r <= 0.0 { 0.0 } else { (self.shape * (1.0 - r + r.ln())).exp() };
        self.base_inflow + excess * pulse
    }

    /// Catchment-mean rainfall intensity (m/s) at time `s`.
    pub fn rain_intensity_at(&self, s: f64) -> f64 {
        let width = self.rain_width * self.duration();
        if width <= 0.0 {
            return 0.0;
        }
        let z = (s - self.rain_time * self.duration()) / width;
        self.rain_peak / 3.6e6 * (-0.5 * z * z).exp()
    }

    fn duration(&self) -> f64 {
        (self.num_steps - 1) as f64 * self.dt
    }
}

#[derive(Clone, Copy)]
struct Point {
    x: f64,
    y: f64,
}

fn centerline(x: f64, width: f64, height: f64, phase: f64) -> f64 {
    0.5 * height + 0.2 * height * (3.0 * PI * x / width + phase).sin()
}

/// Seeded point set with a soft minimum spacing.
fn scatter_points(n: usize, w: f64, h: f64, spacing: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let min_dist2 = (0.5 * spacing).powi(2);
    let cell = 0.5 * spacing;
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut points: Vec<Point> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while points.len() < n {
        attempts += 1;
        let p = Point {
            x: rng.gen_range(0.0..w),
            y: rng.gen_range(0.0..h),
        };
        let (cx, cy) = ((p.x / cell) as i64, (p.y / cell) as i64);
        let relaxed = attempts > 200 * n;
        let crowded = !relaxed
            && (-2..=2).any(|dx| {
                (-2..=2).any(|dy| {
                    grid.get(&(cx + dx, cy + dy)).is_some_and(|bucket| {
                        bucket.iter().any(|&j| {
                            let q = points[j];
                            (q.x - p.x).powi(2) + (q.y - p.y).powi(2) < min_dist2
                        })
                    })
                })
            });
        if crowded {
            continue;
        }
        grid.entry((cx, cy)).or_default().push(points.len());
        points.push(p);
    }
    points
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// True when segments `ab` and `cd` meet anywhere other than a shared
/// endpoint.
fn segments_cross(pts: &[Point], (a, b): (usize, usize), (c, d): (usize, usize)) -> bool {
    let shared = a == c || a == d || b == c || b == d;
    let (pa, pb, pc, pd) = (pts[a], pts[b], pts[c], pts[d]);
    let d1 = cross(pc, pd, pa);
    let d2 = cross(pc, pd, pb);
    let d3 = cross(pa, pb, pc);
    let d4 = cross(pa, pb, pd);
    if shared {
        // Overlapping collinear edges through a common endpoint.
        let (o, p, q) = if a == c {
            (pa, pb, pd)
        } else if a == d {
            (pa, pb, pc)
        } else if b == c {
            (pb, pa, pd)
        } else {
            (pb, pa, pc)
        };
        let c1 = cross(o, p, q);
        let dot = (p.x - o.x) * (q.x - o.x) + (p.y - o.y) * (q.y - o.y);
        let scale = ((p.x - o.x).hypot(p.y - o.y) * (q.x - o.x).hypot(q.y - o.y)).max(f64::MIN_POSITIVE);
        return c1.abs() <= 1e-12 * scale && dot > 0.0;
    }
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Pairs closer than `radius`, sorted by length then index.
fn candidate_pairs(pts: &[Point], radius: f64) -> Vec<(f64, usize, usize)> {
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(((p.x / radius) as i64, (p.y / radius) as i64)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut pairs = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let (cx, cy) = ((p.x / radius) as i64, (p.y / radius) as i64);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        if j > i {
                            let d2 = (pts[j].x - p.x).powi(2) + (pts[j].y - p.y).powi(2);
                            if d2 <= r2 {
                                pairs.push((d2.sqrt(), i, j));
                            }
                        }
                    }
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs
}

/// Accepted segments bucketed by the grid cells their bounding boxes touch.
struct SegmentIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<(usize, usize)>>,
}

impl SegmentIndex {
    fn cells(&self, pts: &[Point], (a, b): (usize, usize)) -> impl Iterator<Item = (i64, i64)> {
        let (pa, pb) = (pts[a], pts[b]);
        let x0 = (pa.x.min(pb.x) / self.cell) as i64;
        let x1 = (pa.x.max(pb.x) / self.cell) as i64;
        let y0 = (pa.y.min(pb.y) / self.cell) as i64;
        let y1 = (pa.y.max(pb.y) / self.cell) as i64;
        (x0..=x1).flat_map(move |x| (y0..=y1).map(move |y| (x, y)))
    }

    fn crosses(&self, pts: &[Point], seg: (usize, usize)) -> bool {
        self.cells(pts, seg).any(|c| {
            self.buckets
                .get(&c)
                .is_some_and(|b| b.iter().any(|&other| segments_cross(pts, seg, other)))
        })
    }

    fn insert(&mut self, pts: &[Point], seg: (usize, usize)) {
        let cells: Vec<_> = self.cells(pts, seg).collect();
        for c in cells {
            self.buckets.entry(c).or_default().push(seg);
        }
    }
}

/// Undirected edge set: spanning tree plus shortest non-crossing extras.
/// The candidate radius grows until `target` edges are found or every pair
/// has been tried, so the result may fall short of `target`.
fn triangulate(pts: &[Point], target: usize, spacing: f64, diameter: f64) -> Vec<(usize, usize)> {
    let n = pts.len();
    let mut radius = 3.0 * spacing;
    let (mut pairs, tree) = loop {
        let pairs = candidate_pairs(pts, radius);
        let mut dsu = DisjointSet((0..n).collect());
        let tree: Vec<usize> = (0..pairs.len())
            .filter(|&k| dsu.union(pairs[k].1, pairs[k].2))
            .collect();
        if tree.len() == n - 1 {
            break (pairs, tree);
        }
        radius *= 2.0;
    };
    let mut index = SegmentIndex {
        cell: 2.0 * spacing,
        buckets: HashMap::new(),
    };
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(target);
    let mut taken = std::collections::HashSet::new();
    for &k in &tree {
        let seg = (pairs[k].1, pairs[k].2);
        index.insert(pts, seg);
        chosen.push(seg);
        taken.insert(seg);
    }
    loop {
        for &(_, a, b) in &pairs {
            if chosen.len() >= target {
                return chosen;
            }
            let seg = (a, b);
            if taken.contains(&seg) || index.crosses(pts, seg) {
                continue;
            }
            index.insert(pts, seg);
            chosen.push(seg);
            taken.insert(seg);
        }
        if radius > diameter {
            return chosen;
        }
        radius *= 2.0;
        pairs = candidate_pairs(pts, radius);
    }
}

/// Builds a connected catchment graph from `spec`.
pub fn generate_catchment(spec: &CatchmentSpec) -> Result<FloodGraph> {
    spec.validate()?;
    let n = spec.num_nodes;
    let [w, h] = spec.resolved_extent();
    let spacing = (w * h / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let pts = scatter_points(n, w, h, spacing, &mut rng);

    let relief = spec.resolved_relief();
    let half = 0.5 * h;
    let channel_half = (spec.channel_fraction * half).max(f64::MIN_POSITIVE);
    let elevation: Vec<f32> = pts
        .iter()
        .map(|p| {
            let off = (p.y - centerline(p.x, w, h, phase)).abs();
            let valley = relief * (0.7 * (1.0 - p.x / w) + 0.3 * (off / half).min(1.0));
            let incision = spec.channel_depth * (1.0 - off / channel_half).max(0.0);
            let noise = 0.01 * relief * rng.gen_range(-1.0..1.0);
            (valley - incision + noise) as f32
        })
        .collect();

    let target = spec.target_edges();
    let undirected = triangulate(&pts, target, spacing, w.hypot(h));
    if spec.num_edges.is_some() && undirected.len() < target {
        return Err(FloodError::Config(format!(
            "only {} non-crossing edges fit, {target} requested",
            undirected.len()
        )));
    }
    let dist = |a: usize, b: usize| (pts[a].x - pts[b].x).hypot(pts[a].y - pts[b].y);

    // Cell area from the mean incident edge length, rescaled to the extent.
    let mut length_sum = vec![0.0f64; n];
    let mut degree = vec![0usize; n];
    for &(a, b) in &undirected {
        let l = dist(a, b);
        for i in [a, b] {
            length_sum[i] += l;
            degree[i] += 1;
        }
    }
    let raw: Vec<f64> = (0..n).map(|i| (length_sum[i] / degree[i] as f64).powi(2)).collect();
    let raw_total: f64 = raw.iter().sum();
    let area: Vec<f32> = raw.iter().map(|a| (a * w * h / raw_total) as f32).collect();

    let mut edges: Vec<(usize, usize)> = undirected
        .iter()
        .map(|&(a, b)| {
            let a_first = elevation[a] > elevation[b] || (elevation[a] == elevation[b] && a < b);
            if a_first {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    edges.sort_unstable();

    let edge_features = Array2::from_shape_fn((edges.len(), 3), |(k, c)| {
        let (s, d) = edges[k];
        match c {
            0 => (0.3 * (f64::from(area[s]).sqrt() + f64::from(area[d]).sqrt())) as f32,
            1 => dist(s, d) as f32,
            _ => elevation[s] - elevation[d],
        }
    });
    let node_features = Array2::from_shape_fn((n, 2), |(i, c)| if c == 0 { area[i] } else { elevation[i] });

    let outflow = (0..n)
        .min_by(|&a, &b| elevation[a].total_cmp(&elevation[b]).then(a.cmp(&b)))
        .expect("at least four nodes");
    let head = Point {
        x: 0.0,
        y: centerline(0.0, w, h, phase),
    };
    let inflow = (0..n)
        .filter(|&i| i != outflow)
        .min_by(|&a, &b| {
            let da = (pts[a].x - head.x).hypot(pts[a].y - head.y);
            let db = (pts[b].x - head.x).hypot(pts[b].y - head.y);
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .expect("at least four nodes");

    FloodGraph::new(GraphParts {
        num_nodes: n,
        edges,
        static_node_features: node_features,
        node_feature_names: vec![NODE_AREA.into(), NODE_ELEVATION.into()],
        static_edge_features: edge_features,
        edge_feature_names: vec![
            EDGE_FACE_LENGTH.into(),
            EDGE_DISTANCE.into(),
            EDGE_ELEVATION_DROP.into(),
        ],
        inflow_nodes: vec![inflow],
        outflow_nodes: vec![outflow],
        depth_curves: area.iter().map(|&a| DepthCurve::prism(a)).collect(),
        positions: Some(Array2::from_shape_fn((n, 2), |(i, c)| {
            if c == 0 {
                pts[i].x as f32
            } else {
                pts[i].y as f32
            }
        })),
    })
}

/// Smallest `dV/dh` over a depth curve; the storage area governing the
/// explicit stability limit.
fn plan_area(curve: &DepthCurve) -> f64 {
    let v = curve.volumes();
    let d = curve.depths();
    v.windows(2)
        .zip(d.windows(2))
        .filter(|(_, dd)| dd[1] > dd[0])
        .map(|(vv, dd)| f64::from(vv[1] - vv[0]) / f64::from(dd[1] - dd[0]))
        .fold(f64::INFINITY, f64::min)
}

struct Router<'a> {
    graph: &'a FloodGraph,
    spec: &'a HydrographSpec,
    bed: Vec<f64>,
    storage: Vec<f64>,
    conductance_scale: Vec<f64>,
    inflow_share: Vec<f64>,
    drain: Vec<bool>,
}

impl Router<'_> {
    /// Signed edge flows and the summed conductance at each node. `depth`
    /// and `lift` are per-node scratch buffers.
    fn fluxes(&self, volume: &[f64], q: &mut [f64], csum: &mut [f64], depth: &mut [f64], lift: &mut [f64]) {
        let curves = self.graph.depth_curves();
        for i in 0..volume.len() {
            let h = curves[i].depth(volume[i]);
            depth[i] = h;
            lift[i] = h * h.cbrt().powi(2);
            csum[i] = 0.0;
        }
        let src = self.graph.src();
        let dst = self.graph.dst();
        for k in 0..q.len() {
            let (s, d) = (src[k], dst[k]);
            let dh = (self.bed[s] + depth[s]) - (self.bed[d] + depth[d]);
            let up = if dh >= 0.0 { s } else { d };
            let c = self.conductance_scale[k] * lift[up];
            q[k] = c * dh;
            csum[s] += c;
            csum[d] += c;
        }
    }

    /// Advances `volume` by one recorded step. Returns per-edge transferred
    /// volume and the drained outlet volume.
    fn step(&self, volume: &mut [f64], rain: &[f64], inflow: f64, t: usize) -> Result<(Vec<f64>, f64)> {
        let n = volume.len();
        let e = self.graph.num_edges();
        let src = self.graph.src();
        let dst = self.graph.dst();
        let dt = self.spec.dt;
        let mut q = vec![0.0; e];
        let mut csum = vec![0.0; n];
        let mut depth = vec![0.0; n];
        let mut lift = vec![0.0; n];
        let mut transfer = vec![0.0; e];
        let mut drained = 0.0;
        let mut demand = vec![0.0; n];
        let mut supply = vec![0.0; n];
        let mut drain = vec![0.0; n];
        let mut remaining = dt;
        let mut substeps = 0usize;
        while remaining > 0.0 {
            substeps += 1;
            if substeps > self.spec.max_substeps {
                return Err(FloodError::InvalidInput(format!(
                    "routing needs more than {} substeps in step {t}; reduce conveyance",
                    self.spec.max_substeps
                )));
            }
            self.fluxes(volume, &mut q, &mut csum, &mut depth, &mut lift);
            let mut h = remaining;
            for i in 0..n {
                if csum[i] > 0.0 {
                    h = h.min(self.spec.courant * self.storage[i] / csum[i]);
                }
            }
            if remaining - h <= 1e-9 * dt {
                h = remaining;
            }

            // Volume demanded from each donor, then a uniform cut where the
            // demand exceeds what the cell holds this substep.
            let drain_fraction = -(-self.spec.drain_rate * h).exp_m1();
            for i in 0..n {
                supply[i] = volume[i] + (rain[i] / dt + self.inflow_share[i] * inflow) * h;
                drain[i] = if self.drain[i] { volume[i] * drain_fraction } else { 0.0 };
                demand[i] = drain[i];
            }
            for k in 0..e {
                let donor = if q[k] >= 0.0 { src[k] } else { dst[k] };
                demand[donor] += q[k].abs() * h;
            }
            // reuse `demand` as the cut factor
            for i in 0..n {
                demand[i] = if demand[i] > supply[i] { supply[i] / demand[i] } else { 1.0 };
            }
            for k in 0..e {
                let donor = if q[k] >= 0.0 { src[k] } else { dst[k] };
                let moved = q[k] * h * demand[donor];
                supply[src[k]] -= moved;
                supply[dst[k]] += moved;
                transfer[k] += moved;
            }
            for i in 0..n {
                let d = drain[i] * demand[i];
                let v = supply[i] - d;
                drained += d;
                assert!(
                    v >= -1e-9 * (1.0 + volume[i]),
                    "routing produced negative volume {v} at node {i}, step {t}"
                );
                volume[i] = v.max(0.0);
            }
            remaining -= h;
        }
        Ok((transfer, drained))
    }
}

/// Simulates one flood event on `graph`.
pub fn generate_event(graph: &FloodGraph, spec: &HydrographSpec) -> Result<EventSeries> {
    spec.validate()?;
    let report = crate::graph::validate_graph(graph);
    if !report.is_valid() {
        return Err(FloodError::InvalidInput(format!(
            "invalid graph: {}",
            report.messages().join("; ")
        )));
    }
    let n = graph.num_nodes();
    let e = graph.num_edges();
    let area = graph.cell_areas().expect("validated graph has areas");
    let bed = graph.bed_elevations().unwrap_or_else(|| vec![0.0; n]);
    let face = column_or(graph, EDGE_FACE_LENGTH, |k| {
        let (s, d) = (graph.src()[k], graph.dst()[k]);
        0.3 * (area[s].sqrt() + area[d].sqrt())
    });
    let length = column_or(graph, EDGE_DISTANCE, |k| {
        let (s, d) = (graph.src()[k], graph.dst()[k]);
        0.5 * (area[s].sqrt() + area[d].sqrt())
    });
    let conductance_scale: Vec<f64> = (0..e)
        .map(|k| spec.conveyance * face[k] / length[k].max(1e-6))
        .collect();
    let storage: Vec<f64> = graph.depth_curves().iter().map(plan_area).collect();
    let router = Router {
        graph,
        spec,
        bed,
        storage,
        conductance_scale,
        inflow_share: graph.boundary_flux(1.0, 0.0).iter().map(|b| b.max(0.0)).collect(),
        drain: {
            let mut m = vec![false; n];
            for &i in graph.outflow_nodes() {
                m[i] = true;
            }
            m
        },
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pattern = rain_pattern(graph, spec, &mut rng);

    let steps = spec.num_steps;
    let dt = spec.dt;
    let mut event = EventSeries::zeros(graph, steps, dt);
    let mut volume: Vec<f64> = graph
        .depth_curves()
        .iter()
        .map(|c| initial_volume(c, spec.initial_depth))
        .collect();
    for t in 0..steps {
        let mid = (t as f64 + 0.5) * dt;
        let inflow = spec.inflow_at(mid);
        let intensity = spec.rain_intensity_at(mid);
        let rain: Vec<f64> = (0..n).map(|i| intensity * area[i] * pattern[i] * dt).collect();
        for i in 0..n {
            event.node_volume[[t, i]] = volume[i] as f32;
            event.rainfall[[t, i]] = rain[i] as f32;
        }
        event.inflow_bc[t] = inflow as f32;
        if t == 0 {
            let mut q = vec![0.0; e];
            router.fluxes(&volume, &mut q, &mut vec![0.0; n], &mut vec![0.0; n], &mut vec![0.0; n]);
            for k in 0..e {
                event.edge_flow[[0, k]] = q[k] as f32;
            }
        }
        if t + 1 == steps {
            let drain: f64 = graph.outflow_nodes().iter().map(|&i| spec.drain_rate * volume[i]).sum();
            event.outflow_bc[t] = drain as f32;
            break;
        }
        let (transfer, drained) = router.step(&mut volume, &rain, inflow, t)?;
        event.outflow_bc[t] = (drained / dt) as f32;
        for k in 0..e {
            event.edge_flow[[t + 1, k]] = (transfer[k] / dt) as f32;
        }
    }
    Ok(event)
}

fn column_or(graph: &FloodGraph, name: &str, fallback: impl Fn(usize) -> f64) -> Vec<f64> {
    match graph.edge_feature_names().iter().position(|c| c == name) {
        Some(c) => graph
            .static_edge_features()
            .column(c)
            .iter()
            .map(|v| f64::from(*v))
            .collect(),
        None => (0..graph.num_edges()).map(fallback).collect(),
    }
}

fn initial_volume(curve: &DepthCurve, depth: f64) -> f64 {
    if depth <= 0.0 {
        return 0.0;
    }
    // Invert the monotone curve by bisection.
    let (mut lo, mut hi) = (0.0f64, f64::from(*curve.volumes().last().unwrap_or(&1.0)).max(1.0));
    while curve.depth(hi) < depth {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if curve.depth(mid) < depth {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Smooth multiplicative rainfall field with mean close to one.
fn rain_pattern(graph: &FloodGraph, spec: &HydrographSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (fx, fy, px, py): (f64, f64, f64, f64) = (
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.0..2.0 * PI),
        rng.gen_range(0.0..2.0 * PI),
    );
    let n = graph.num_nodes();
    match graph.positions() {
        Some(pos) => {
            let span = |c: usize| {
                let col = pos.column(c);
                let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                (f64::from(lo), f64::from(hi - lo).max(1e-9))
            };
            let ((x0, sx), (y0, sy)) = (span(0), span(1));
            (0..n)
                .map(|i| {
                    let x = (f64::from(pos[[i, 0]]) - x0) / sx;
                    let y = (f64::from(pos[[i, 1]]) - y0) / sy;
                    1.0 + spec.rain_variability * (2.0 * PI * fx * x + px).sin() * (2.0 * PI * fy * y + py).cos()
                })
                .collect()
        }
        None => (0..n)
            .map(|_| 1.0 + spec.rain_variability * rng.gen_range(-1.0..1.0))
            .collect(),
    }
}

/// Per-step balance residuals of a stored event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    /// `|global residual|` for each step `t -> t+1` (m³).
    pub global: Vec<f64>,
    /// Largest `|local residual|` over nodes, per step (m³).
    pub local_max: Vec<f64>,
    /// Mean `|local residual|` over nodes, per step (m³).
    pub local_mean: Vec<f64>,
    /// Largest node volume anywhere in the event (m³).
    pub peak_volume: f64,
}

impl ConservationReport {
    pub fn max_global(&self) -> f64 {
        self.global.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_local(&self) -> f64 {
        self.local_max.iter().copied().fold(0.0, f64::max)
    }

    /// Worst residual divided by `max(1, peak volume)`.
    pub fn max_relative(&self) -> f64 {
        self.max_global().max(self.max_local()) / self.peak_volume.max(1.0)
    }
}

/// Recomputes both mass balances from the stored series in float64, with
/// boundary fluxes assigned as in the physics losses.
pub fn conservation_report(graph: &FloodGraph, event: &EventSeries) -> Result<ConservationReport> {
    event.validate(graph)?;
    let n = graph.num_nodes();
    let steps = event.num_steps();
    let mut report = ConservationReport {
        global: Vec::with_capacity(steps - 1),
        local_max: Vec::with_capacity(steps - 1),
        local_mean: Vec::with_capacity(steps - 1),
        peak_volume: event.node_volume.iter().map(|v| f64::from(*v)).fold(0.0, f64::max),
    };
    for t in 0..steps.saturating_sub(1) {
        let dv: Vec<f64> = (0..n)
            .map(|i| f64::from(event.node_volume[[t + 1, i]]) - f64::from(event.node_volume[[t, i]]))
            .collect();
        let q: Vec<f64> = event.edge_flow.row(t + 1).iter().map(|v| f64::from(*v)).collect();
        let forcing = StepForcing {
            rainfall: event.rainfall.row(t).iter().map(|v| f64::from(*v)).collect(),
            inflow: f64::from(event.inflow_bc[t]),
            outflow: f64::from(event.outflow_bc[t]),
            dt: event.dt,
        };
        let local = local_residuals(graph, &dv, &q, &forcing)?;
        report.global.push(global_residual(&dv, &forcing).abs());
        report.local_max.push(local.iter().map(|r| r.abs()).fold(0.0, f64::max));
        report.local_mean.push(local.iter().map(|r| r.abs()).sum::<f64>() / n as f64);
    }
    Ok(report)
}
