//! Autoregressive inference and the metric suite.
//!
//! A rollout starts from a ground-truth state and feeds every prediction
//! back as the next input; boundary forcing (rainfall, inflow, outflow)
//! stays ground truth. Metrics compare predicted rows `1..=T` against the
//! truth.

use std::fs;
use std::path::Path;
use std::time::Instant;

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EventSeries;
use crate::error::{FloodError, Result};
use crate::graph::FloodGraph;
use crate::model::Predictor;

pub const REPORT_VERSION: &str = "1";
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.05, 0.3];

/// Predicted trajectory. Row 0 is the initial condition taken from the
/// event at `start`; row `k` is the prediction for timestep `start + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub start: usize,
    pub node_volume: Array2<f64>,
    pub edge_flow: Array2<f64>,
    pub depth: Array2<f64>,
    /// Negative predicted volumes clamped to zero depth.
    pub clamped: usize,
    /// Wall-clock time of the prediction loop only.
    pub inference_seconds: f64,
}

impl RolloutResult {
    pub fn steps(&self) -> usize {
        self.node_volume.nrows() - 1
    }
}

/// Depth matrix from a volume matrix plus the count of negative volumes
/// that were clamped.
pub fn volume_to_depth(graph: &FloodGraph, volume: ArrayView2<f64>) -> Result<(Array2<f64>, usize)> {
    if volume.ncols() != graph.num_nodes() {
        return Err(FloodError::Shape(format!(
            "volume has {} columns, graph has {} nodes",
            volume.ncols(),
            graph.num_nodes()
        )));
    }
    let curves = graph.depth_curves();
    let mut clamped = 0;
    let mut out = Array2::zeros(volume.dim());
    for ((r, c), v) in volume.indexed_iter() {
        if *v < 0.0 {
            clamped += 1;
        }
        out[[r, c]] = curves[c].depth(v.max(0.0));
    }
    if clamped > 0 {
        log::warn!("{clamped} negative volumes clamped to zero depth");
    }
    Ok((out, clamped))
}

fn to_f64(m: ArrayView2<f32>) -> Array2<f64> {
    m.mapv(f64::from)
}

/// Chains `horizon` predictions from ground truth at `start`. Predicted
/// states are written back into a working copy of the event (as f32, the
/// storage precision) and read from there by the next step.
pub fn rollout(
    predictor: &dyn Predictor,
    graph: &FloodGraph,
    event: &EventSeries,
    start: usize,
    horizon: usize,
) -> Result<RolloutResult> {
    let p = predictor.features().history;
    if start < p {
        return Err(FloodError::InsufficientHistory { t: start, p });
    }
    if start + horizon >= event.num_steps() {
        return Err(FloodError::HorizonExceedsEvent {
            start,
            horizon,
            num_steps: event.num_steps(),
        });
    }
    event.validate(graph)?;
    let mut work = event.clone();
    let clock = Instant::now();
    for t in start..start + horizon {
        let out = predictor.predict(graph, &work, t)?;
        if out.delta_volume.len() != graph.num_nodes() || out.delta_flow.len() != graph.num_edges() {
            return Err(FloodError::Shape("predictor returned wrongly sized deltas".into()));
        }
        for (i, d) in out.delta_volume.iter().enumerate() {
            work.node_volume[[t + 1, i]] = (f64::from(work.node_volume[[t, i]]) + d) as f32;
        }
        for (k, d) in out.delta_flow.iter().enumerate() {
            work.edge_flow[[t + 1, k]] = (f64::from(work.edge_flow[[t, k]]) + d) as f32;
        }
    }
    let inference_seconds = clock.elapsed().as_secs_f64();
    let rows = s![start..=start + horizon, ..];
    let node_volume = to_f64(work.node_volume.slice(rows));
    let (depth, clamped) = volume_to_depth(graph, node_volume.view())?;
    Ok(RolloutResult {
        start,
        node_volume,
        edge_flow: to_f64(work.edge_flow.slice(rows)),
        depth,
        clamped,
        inference_seconds,
    })
}

fn check_pair(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(FloodError::Shape(format!(
            "series lengths differ: {} vs {}",
            pred.len(),
            obs.len()
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    if pred.is_empty() {
        return Err(FloodError::InvalidInput("rmse of an empty series".into()));
    }
    let sse: f64 = pred.iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    if pred.is_empty() {
        return Err(FloodError::InvalidInput("mae of an empty series".into()));
    }
    Ok(pred.iter().zip(obs).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Nash–Sutcliffe efficiency `1 − SSE/SST`. `None` when the observations
/// are constant and the score is undefined.
pub fn nse(pred: &[f64], obs: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, obs)?;
    if obs.len() < 2 {
        return Err(FloodError::InvalidInput("nse needs at least two values".into()));
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let sst: f64 = obs.iter().map(|o| (o - mean) * (o - mean)).sum();
    if sst == 0.0 {
        return Ok(None);
    }
    let sse: f64 = pred.iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(Some(1.0 - sse / sst))
}

/// Column-wise NSE averaged over columns with non-constant observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NseSummary {
    pub mean: Option<f64>,
    pub series: usize,
    /// Columns excluded for constant observations.
    pub undefined: usize,
}

pub fn nse_per_column(pred: ArrayView2<f64>, obs: ArrayView2<f64>) -> Result<NseSummary> {
    if pred.dim() != obs.dim() {
        return Err(FloodError::Shape(format!("{:?} vs {:?}", pred.dim(), obs.dim())));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..obs.ncols() {
        let a: Vec<f64> = pred.column(c).to_vec();
        let b: Vec<f64> = obs.column(c).to_vec();
        if let Some(v) = nse(&a, &b)? {
            sum += v;
            used += 1;
        }
    }
    Ok(NseSummary {
        mean: (used > 0).then(|| sum / used as f64),
        series: used,
        undefined: obs.ncols() - used,
    })
}

/// Flooded-cell confusion counts at one depth threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// `TP / (TP + FN + FP)`, with 1 when nothing is flooded on either side.
    pub fn csi(&self) -> f64 {
        let denom = self.tp + self.fn_ + self.fp;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// A cell is flooded when its depth is at least `tau`.
pub fn confusion(pred: &[f64], obs: &[f64], tau: f64) -> Result<Confusion> {
    check_pair(pred, obs)?;
    let mut c = Confusion::default();
    for (p, o) in pred.iter().zip(obs) {
        match (*p >= tau, *o >= tau) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// CSI pooled over every cell.
pub fn csi(pred: &[f64], obs: &[f64], tau: f64) -> Result<f64> {
    Ok(confusion(pred, obs, tau)?.csi())
}

/// Mean over rows of the per-row CSI.
pub fn csi_per_row_mean(pred: ArrayView2<f64>, obs: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if pred.dim() != obs.dim() || obs.nrows() == 0 {
        return Err(FloodError::Shape(format!("{:?} vs {:?}", pred.dim(), obs.dim())));
    }
    let mut sum = 0.0;
    for (a, b) in pred.rows().into_iter().zip(obs.rows()) {
        sum += csi(&a.to_vec(), &b.to_vec(), tau)?;
    }
    Ok(sum / obs.nrows() as f64)
}

/// Per-row RMSE.
pub fn rmse_series(pred: ArrayView2<f64>, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
    if pred.dim() != obs.dim() {
        return Err(FloodError::Shape(format!("{:?} vs {:?}", pred.dim(), obs.dim())));
    }
    pred.rows()
        .into_iter()
        .zip(obs.rows())
        .map(|(a, b)| rmse(&a.to_vec(), &b.to_vec()))
        .collect()
}

/// Column-wise maximum.
pub fn max_over_rows(m: ArrayView2<f64>) -> Vec<f64> {
    m.columns()
        .into_iter()
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub nse: NseSummary,
}

impl VariableMetrics {
    fn compute(pred: ArrayView2<f64>, obs: ArrayView2<f64>) -> Result<Self> {
        let a: Vec<f64> = pred.iter().copied().collect();
        let b: Vec<f64> = obs.iter().copied().collect();
        Ok(Self {
            rmse: rmse(&a, &b)?,
            mae: mae(&a, &b)?,
            nse: nse_per_column(pred, obs)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsiEntry {
    pub threshold: f64,
    pub csi: f64,
    pub csi_per_timestep_mean: f64,
    pub counts: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerTimestepRmse {
    pub volume: Vec<f64>,
    pub flow: Vec<f64>,
    pub depth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub nse: String,
    pub csi: String,
}

impl Default for Aggregation {
    fn default() -> Self {
        Self {
            nse: "per_node_mean".into(),
            csi: "micro".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: String,
    pub start: usize,
    pub steps: usize,
    pub inference_seconds: f64,
    pub aggregation: Aggregation,
    pub volume: VariableMetrics,
    pub flow: VariableMetrics,
    pub depth: VariableMetrics,
    pub csi: Vec<CsiEntry>,
    pub depth_clamped: usize,
    pub per_timestep_rmse: PerTimestepRmse,
}

/// Per-node maximum depth over the rollout window.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxDepthMap {
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Metrics of `result` against `event`, over predicted rows `1..=T`.
pub fn event_report(result: &RolloutResult, event: &EventSeries, graph: &FloodGraph, thresholds: &[f64]) -> Result<(MetricsReport, MaxDepthMap)> {
    let t = result.steps();
    if t == 0 {
        return Err(FloodError::InvalidInput("report needs at least one predicted step".into()));
    }
    if result.start + t >= event.num_steps() {
        return Err(FloodError::HorizonExceedsEvent {
            start: result.start,
            horizon: t,
            num_steps: event.num_steps(),
        });
    }
    let truth_rows = s![result.start + 1..=result.start + t, ..];
    let true_v = to_f64(event.node_volume.slice(truth_rows));
    let true_q = to_f64(event.edge_flow.slice(truth_rows));
    let (true_d, _) = volume_to_depth(graph, true_v.view())?;
    let pred_v = result.node_volume.slice(s![1.., ..]);
    let pred_q = result.edge_flow.slice(s![1.., ..]);
    let pred_d = result.depth.slice(s![1.., ..]);
    if pred_v.dim() != true_v.dim() || pred_q.dim() != true_q.dim() {
        return Err(FloodError::Shape("rollout does not match the event".into()));
    }
    let flat_pred: Vec<f64> = pred_d.iter().copied().collect();
    let flat_true: Vec<f64> = true_d.iter().copied().collect();
    let csi = thresholds
        .iter()
        .map(|&tau| {
            let counts = confusion(&flat_pred, &flat_true, tau)?;
            Ok(CsiEntry {
                threshold: tau,
                csi: counts.csi(),
                csi_per_timestep_mean: csi_per_row_mean(pred_d, true_d.view(), tau)?,
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport {
        report_version: REPORT_VERSION.into(),
        start: result.start,
        steps: t,
        inference_seconds: result.inference_seconds,
        aggregation: Aggregation::default(),
        volume: VariableMetrics::compute(pred_v, true_v.view())?,
        flow: VariableMetrics::compute(pred_q, true_q.view())?,
        depth: VariableMetrics::compute(pred_d, true_d.view())?,
        csi,
        depth_clamped: result.clamped,
        per_timestep_rmse: PerTimestepRmse {
            volume: rmse_series(pred_v, true_v.view())?,
            flow: rmse_series(pred_q, true_q.view())?,
            depth: rmse_series(pred_d, true_d.view())?,
        },
    };
    let map = MaxDepthMap {
        truth: max_over_rows(true_d.view()),
        predicted: max_over_rows(pred_d),
    };
    Ok((report, map))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    /// Population mean and standard deviation; `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Mean ± std across events of the headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub report_version: String,
    pub events: usize,
    pub metrics: std::collections::BTreeMap<String, MeanStd>,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut push = |name: String, v: Option<f64>| {
        if let Some(v) = v {
            match columns.iter_mut().find(|(n, _)| *n == name) {
                Some((_, vals)) => vals.push(v),
                None => columns.push((name, vec![v])),
            }
        }
    };
    for r in reports {
        for (var, m) in [("volume", &r.volume), ("flow", &r.flow), ("depth", &r.depth)] {
            push(format!("{var}.rmse"), Some(m.rmse));
            push(format!("{var}.mae"), Some(m.mae));
            push(format!("{var}.nse"), m.nse.mean);
        }
        for c in &r.csi {
            push(format!("csi@{}", c.threshold), Some(c.csi));
        }
        push("inference_seconds".into(), Some(r.inference_seconds));
    }
    AggregateReport {
        report_version: REPORT_VERSION.into(),
        events: reports.len(),
        metrics: columns
            .into_iter()
            .filter_map(|(n, v)| MeanStd::of(&v).map(|m| (n, m)))
            .collect(),
    }
}

/// Rolls out and scores every event in parallel. `make` builds the
/// predictor for one event (the oracle needs the event's truth).
pub fn evaluate_events<F>(
    make: F,
    graph: &FloodGraph,
    events: &[EventSeries],
    horizon: Option<usize>,
    thresholds: &[f64],
) -> Result<Vec<(RolloutResult, MetricsReport, MaxDepthMap)>>
where
    F: Fn(&EventSeries) -> Result<Box<dyn Predictor + Send>> + Sync,
{
    events
        .par_iter()
        .map(|ev| {
            let predictor = make(ev)?;
            let start = predictor.features().history;
            let t = horizon.unwrap_or_else(|| ev.num_steps().saturating_sub(start + 1));
            let result = rollout(predictor.as_ref(), graph, ev, start, t)?;
            let (report, map) = event_report(&result, ev, graph, thresholds)?;
            Ok((result, report, map))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TimestepRow {
    step: usize,
    volume: f32,
    flow: f32,
    depth: f32,
}

#[derive(Serialize, Deserialize)]
struct DepthRow {
    node: usize,
    #[serde(rename = "true")]
    truth: f32,
    predicted: f32,
    diff: f32,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| FloodError::csv(path, e))
}

pub fn write_per_timestep_rmse(path: &Path, series: &PerTimestepRmse) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (k, ((v, q), d)) in series.volume.iter().zip(&series.flow).zip(&series.depth).enumerate() {
        w.serialize(TimestepRow {
            step: k + 1,
            volume: *v as f32,
            flow: *q as f32,
            depth: *d as f32,
        })
        .map_err(|e| FloodError::csv(path, e))?;
    }
    w.flush().map_err(|e| FloodError::io(path, e))
}

pub fn read_per_timestep_rmse(path: &Path) -> Result<PerTimestepRmse> {
    let mut r = csv::Reader::from_path(path).map_err(|e| FloodError::csv(path, e))?;
    let mut out = PerTimestepRmse {
        volume: Vec::new(),
        flow: Vec::new(),
        depth: Vec::new(),
    };
    for row in r.deserialize::<TimestepRow>() {
        let row = row.map_err(|e| FloodError::csv(path, e))?;
        out.volume.push(f64::from(row.volume));
        out.flow.push(f64::from(row.flow));
        out.depth.push(f64::from(row.depth));
    }
    Ok(out)
}

pub fn write_max_depth_map(path: &Path, map: &MaxDepthMap) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (node, (t, p)) in map.truth.iter().zip(&map.predicted).enumerate() {
        let (t, p) = (*t as f32, *p as f32);
        w.serialize(DepthRow {
            node,
            truth: t,
            predicted: p,
            diff: p - t,
        })
        .map_err(|e| FloodError::csv(path, e))?;
    }
    w.flush().map_err(|e| FloodError::io(path, e))
}

pub fn read_max_depth_map(path: &Path) -> Result<MaxDepthMap> {
    let mut r = csv::Reader::from_path(path).map_err(|e| FloodError::csv(path, e))?;
    let mut map = MaxDepthMap {
        truth: Vec::new(),
        predicted: Vec::new(),
    };
    for row in r.deserialize::<DepthRow>() {
        let row = row.map_err(|e| FloodError::csv(path, e))?;
        map.truth.push(f64::from(row.truth));
        map.predicted.push(f64::from(row.predicted));
    }
    Ok(map)
}

/// Writes `m` with a `step` column followed by one `{prefix}{j}` column per
/// matrix column, values at f32 precision.
pub fn write_matrix_csv(path: &Path, prefix: &str, first_step: usize, m: ArrayView2<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain((0..m.ncols()).map(|j| format!("{prefix}{j}")))
        .collect();
    w.write_record(&header).map_err(|e| FloodError::csv(path, e))?;
    for (r, row) in m.rows().into_iter().enumerate() {
        let rec: Vec<String> = std::iter::once((first_step + r).to_string())
            .chain(row.iter().map(|v| (*v as f32).to_string()))
            .collect();
        w.write_record(&rec).map_err(|e| FloodError::csv(path, e))?;
    }
    w.flush().map_err(|e| FloodError::io(path, e))
}

const PLOT_BG: Rgb<u8> = Rgb([255, 255, 255]);
const PLOT_AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const PLOT_LINES: [Rgb<u8>; 3] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44])];

/// Three stacked panels, one per series, each scaled to its own maximum.
pub fn plot_rmse_series(path: &Path, series: &PerTimestepRmse) -> Result<()> {
    let (w, panel) = (640u32, 160u32);
    let mut img = RgbImage::from_pixel(w, panel * 3, PLOT_BG);
    for (k, ys) in [&series.volume, &series.flow, &series.depth].into_iter().enumerate() {
        let top = panel * k as u32;
        let (x0, x1, y0, y1) = (10.0, f64::from(w) - 10.0, f64::from(top + panel) - 10.0, f64::from(top) + 10.0);
        for x in x0 as u32..=x1 as u32 {
            img.put_pixel(x, y0 as u32, PLOT_AXIS);
        }
        for y in y1 as u32..=y0 as u32 {
            img.put_pixel(x0 as u32, y, PLOT_AXIS);
        }
        let max = ys.iter().copied().fold(0.0, f64::max);
        if ys.len() < 2 || max <= 0.0 {
            continue;
        }
        let at = |i: usize| {
            let x = x0 + (x1 - x0) * i as f64 / (ys.len() - 1) as f64;
            let y = y0 + (y1 - y0) * ys[i] / max;
            (x, y)
        };
        for i in 1..ys.len() {
            let (a, b) = (at(i - 1), at(i));
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for j in 0..=n {
                let f = j as f64 / n as f64;
                let (x, y) = (a.0 + (b.0 - a.0) * f, a.1 + (b.1 - a.1) * f);
                img.put_pixel(x.round() as u32, y.round() as u32, PLOT_LINES[k]);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

fn ramp(f: f64) -> Rgb<u8> {
    let f = f.clamp(0.0, 1.0);
    // white to dark blue
    let c = |lo: f64, hi: f64| (lo + (hi - lo) * f).round() as u8;
    Rgb([c(247.0, 8.0), c(251.0, 48.0), c(255.0, 107.0)])
}

/// True and predicted maximum depth side by side, drawn at the node
/// positions. Skipped (returns false) when the graph has no positions.
pub fn plot_max_depth(path: &Path, graph: &FloodGraph, map: &MaxDepthMap) -> Result<bool> {
    let Some(pos) = graph.positions() else {
        return Ok(false);
    };
    let xs: Vec<f64> = pos.column(0).iter().map(|v| f64::from(*v)).collect();
    let ys: Vec<f64> = pos.column(1).iter().map(|v| f64::from(*v)).collect();
    let bounds = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let ((xmin, xmax), (ymin, ymax)) = (bounds(&xs), bounds(&ys));
    let span = (xmax - xmin).max(ymax - ymin).max(f64::EPSILON);
    let side = 320u32;
    let mut img = RgbImage::from_pixel(side * 2 + 10, side, PLOT_BG);
    let top = map.truth.iter().chain(&map.predicted).copied().fold(0.0, f64::max).max(f64::EPSILON);
    for (panel, vals) in [&map.truth, &map.predicted].into_iter().enumerate() {
        let off = panel as u32 * (side + 10);
        for i in 0..xs.len() {
            let px = off + 4 + ((xs[i] - xmin) / span * f64::from(side - 8)) as u32;
            let py = side - 4 - ((ys[i] - ymin) / span * f64::from(side - 8)) as u32;
            let color = ramp(vals[i] / top);
            for dx in 0..3 {
                for dy in 0..3 {
                    let (x, y) = (px + dx - 1, py + dy - 1);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
    }
    img.save(path)?;
    Ok(true)
}

/// Writes `metrics.json`, `per_timestep_rmse.csv`, `max_depth_map.csv` and
/// the PNG plots into `dir`.
pub fn write_event_report(dir: &Path, graph: &FloodGraph, report: &MetricsReport, map: &MaxDepthMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FloodError::io(dir, e))?;
    let path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| FloodError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| FloodError::io(&path, e))?;
    write_per_timestep_rmse(&dir.join("per_timestep_rmse.csv"), &report.per_timestep_rmse)?;
    write_max_depth_map(&dir.join("max_depth_map.csv"), map)?;
    plot_rmse_series(&dir.join("per_timestep_rmse.png"), &report.per_timestep_rmse)?;
    plot_max_depth(&dir.join("max_depth_map.png"), graph, map)?;
    Ok(())
}
