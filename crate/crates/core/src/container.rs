//! On-disk dataset container.
//!
//! A dataset is a directory holding `manifest.json` plus one headerless
//! binary file per array. Floating-point arrays are little-endian IEEE-754
//! `f32`, index arrays little-endian `i32`, both row-major. The manifest
//! records counts, timestep lengths, feature schemas with units, and the
//! shape/dtype/file of every array.
//!
//! ```text
//! manifest.json
//! graph/edge_index.bin            i32  [2, E]   row 0 = src, row 1 = dst
//! graph/static_node_features.bin  f32  [N, Fn]
//! graph/static_edge_features.bin  f32  [E, Fe]
//! graph/inflow_nodes.bin          i32  [n_in]
//! graph/outflow_nodes.bin         i32  [n_out]
//! graph/depth_curve_offsets.bin   i32  [N+1]
//! graph/depth_curve_volumes.bin   f32  [K]
//! graph/depth_curve_depths.bin    f32  [K]
//! graph/node_positions.bin        f32  [N, 2]   (optional)
//! events/event_0000/node_volume.bin  f32 [T+1, N]
//! events/event_0000/edge_flow.bin    f32 [T+1, E]
//! events/event_0000/rainfall.bin     f32 [T+1, N]
//! events/event_0000/inflow_bc.bin    f32 [T+1]
//! events/event_0000/outflow_bc.bin   f32 [T+1]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::EventSeries;
use crate::error::{FloodError, Result};
use crate::graph::{DepthCurve, FloodGraph, GraphParts};

pub const DATASET_FORMAT: &str = "dualflood-dataset";
pub const DATASET_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub unit: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventEntry {
    pub id: String,
    pub dt_seconds: f64,
    pub num_steps: usize,
    pub arrays: Vec<ArraySpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub format_version: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_events: usize,
    pub node_features: Vec<FieldSchema>,
    pub edge_features: Vec<FieldSchema>,
    pub event_fields: Vec<FieldSchema>,
    pub graph_arrays: Vec<ArraySpec>,
    pub events: Vec<EventEntry>,
    /// Generator parameters and seeds, when the data is synthetic.
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

/// A catchment graph with its events.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: FloodGraph,
    pub events: Vec<EventSeries>,
    pub generator: Option<serde_json::Value>,
}

fn unit_of(name: &str) -> &'static str {
    const SUFFIXES: [(&str, &str); 4] = [("_m2", "m2"), ("_m3s", "m3/s"), ("_m3", "m3"), ("_m", "m")];
    SUFFIXES
        .iter()
        .find(|(s, _)| name.ends_with(s))
        .map(|(_, u)| *u)
        .unwrap_or("")
}

fn schema(names: &[String]) -> Vec<FieldSchema> {
    names
        .iter()
        .map(|n| FieldSchema {
            name: n.clone(),
            unit: unit_of(n).into(),
        })
        .collect()
}

fn event_fields() -> Vec<FieldSchema> {
    [
        ("node_volume", "m3"),
        ("edge_flow", "m3/s"),
        ("rainfall", "m3/step"),
        ("inflow_bc", "m3/s"),
        ("outflow_bc", "m3/s"),
    ]
    .iter()
    .map(|(n, u)| FieldSchema {
        name: (*n).into(),
        unit: (*u).into(),
    })
    .collect()
}

pub(crate) fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub(crate) fn write_i32(path: &Path, values: impl IntoIterator<Item = usize>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        let v = i32::try_from(v)
            .map_err(|_| FloodError::InvalidInput(format!("index {v} does not fit in i32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| FloodError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| FloodError::io(path, e))?;
    f.write_all(bytes).map_err(|e| FloodError::io(path, e))
}

fn read_words(path: &Path, expected: usize) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path).map_err(|e| FloodError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(FloodError::corrupt(
            path,
            format!(
                "size mismatch: {} bytes on disk, manifest implies {}",
                bytes.len(),
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

pub(crate) fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    Ok(read_words(path, expected)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect())
}

pub(crate) fn read_i32(path: &Path, expected: usize, bound: usize) -> Result<Vec<usize>> {
    read_words(path, expected)?
        .into_iter()
        .map(|w| {
            let v = i32::from_le_bytes(w);
            usize::try_from(v)
                .ok()
                .filter(|&u| u < bound)
                .ok_or_else(|| FloodError::corrupt(path, format!("index {v} outside [0, {bound})")))
        })
        .collect()
}

struct Writer<'a> {
    root: &'a Path,
    specs: Vec<ArraySpec>,
}

impl<'a> Writer<'a> {
    fn f32(&mut self, name: &str, file: String, shape: Vec<usize>, values: impl IntoIterator<Item = f32>) -> Result<()> {
        write_f32(&self.root.join(&file), values)?;
        self.specs.push(ArraySpec {
            name: name.into(),
            file,
            dtype: DType::F32,
            shape,
        });
        Ok(())
    }

    fn i32(&mut self, name: &str, file: String, shape: Vec<usize>, values: impl IntoIterator<Item = usize>) -> Result<()> {
        write_i32(&self.root.join(&file), values)?;
        self.specs.push(ArraySpec {
            name: name.into(),
            file,
            dtype: DType::I32,
            shape,
        });
        Ok(())
    }
}

/// Writes `graph` and `events` under `root` (created if missing).
pub fn save_dataset(
    root: &Path,
    graph: &FloodGraph,
    events: &[EventSeries],
    generator: Option<serde_json::Value>,
) -> Result<()> {
    for ev in events {
        ev.validate(graph)?;
    }
    fs::create_dir_all(root).map_err(|e| FloodError::io(root, e))?;
    let n = graph.num_nodes();
    let e = graph.num_edges();

    let mut w = Writer {
        root,
        specs: Vec::new(),
    };
    w.i32(
        "edge_index",
        "graph/edge_index.bin".into(),
        vec![2, e],
        graph.src().iter().chain(graph.dst().iter()).copied(),
    )?;
    let snf = graph.static_node_features();
    w.f32(
        "static_node_features",
        "graph/static_node_features.bin".into(),
        vec![n, snf.ncols()],
        snf.iter().copied(),
    )?;
    let sef = graph.static_edge_features();
    w.f32(
        "static_edge_features",
        "graph/static_edge_features.bin".into(),
        vec![e, sef.ncols()],
        sef.iter().copied(),
    )?;
    w.i32(
        "inflow_nodes",
        "graph/inflow_nodes.bin".into(),
        vec![graph.inflow_nodes().len()],
        graph.inflow_nodes().iter().copied(),
    )?;
    w.i32(
        "outflow_nodes",
        "graph/outflow_nodes.bin".into(),
        vec![graph.outflow_nodes().len()],
        graph.outflow_nodes().iter().copied(),
    )?;
    let mut offsets = vec![0usize];
    for c in graph.depth_curves() {
        offsets.push(offsets.last().unwrap() + c.volumes().len());
    }
    let k = *offsets.last().unwrap();
    w.i32(
        "depth_curve_offsets",
        "graph/depth_curve_offsets.bin".into(),
        vec![n + 1],
        offsets,
    )?;
    w.f32(
        "depth_curve_volumes",
        "graph/depth_curve_volumes.bin".into(),
        vec![k],
        graph.depth_curves().iter().flat_map(|c| c.volumes().iter().copied()),
    )?;
    w.f32(
        "depth_curve_depths",
        "graph/depth_curve_depths.bin".into(),
        vec![k],
        graph.depth_curves().iter().flat_map(|c| c.depths().iter().copied()),
    )?;
    if let Some(pos) = graph.positions() {
        w.f32(
            "node_positions",
            "graph/node_positions.bin".into(),
            vec![n, 2],
            pos.iter().copied(),
        )?;
    }
    let graph_arrays = std::mem::take(&mut w.specs);

    let mut entries = Vec::with_capacity(events.len());
    for (idx, ev) in events.iter().enumerate() {
        let id = format!("event_{idx:04}");
        let dir = format!("events/{id}");
        let steps = ev.num_steps();
        w.f32("node_volume", format!("{dir}/node_volume.bin"), vec![steps, n], ev.node_volume.iter().copied())?;
        w.f32("edge_flow", format!("{dir}/edge_flow.bin"), vec![steps, e], ev.edge_flow.iter().copied())?;
        w.f32("rainfall", format!("{dir}/rainfall.bin"), vec![steps, n], ev.rainfall.iter().copied())?;
        w.f32("inflow_bc", format!("{dir}/inflow_bc.bin"), vec![steps], ev.inflow_bc.iter().copied())?;
        w.f32("outflow_bc", format!("{dir}/outflow_bc.bin"), vec![steps], ev.outflow_bc.iter().copied())?;
        entries.push(EventEntry {
            id,
            dt_seconds: ev.dt,
            num_steps: steps,
            arrays: std::mem::take(&mut w.specs),
        });
    }

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        format_version: DATASET_VERSION.into(),
        num_nodes: n,
        num_edges: e,
        num_events: events.len(),
        node_features: schema(graph.node_feature_names()),
        edge_features: schema(graph.edge_feature_names()),
        event_fields: event_fields(),
        graph_arrays,
        events: entries,
        generator,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| FloodError::json(&path, e))?;
    write_bytes(&path, text.as_bytes())
}

/// Reads and validates the manifest only.
pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FloodError::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| FloodError::corrupt(&path, e.to_string()))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(DATASET_FORMAT) {
        return Err(FloodError::corrupt(&path, "not a dualflood dataset manifest"));
    }
    let version = value
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if version != DATASET_VERSION {
        return Err(FloodError::UnsupportedVersion {
            found: version.into(),
            expected: DATASET_VERSION.into(),
        });
    }
    serde_json::from_value(value).map_err(|e| FloodError::corrupt(&path, e.to_string()))
}

struct Reader<'a> {
    root: &'a Path,
    specs: &'a [ArraySpec],
}

impl Reader<'_> {
    fn spec(&self, name: &str, dtype: DType, shape: &[usize]) -> Result<(PathBuf, usize)> {
        let spec = self
            .specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| FloodError::corrupt(self.root, format!("manifest lacks array `{name}`")))?;
        if spec.dtype != dtype {
            return Err(FloodError::Schema(format!(
                "array `{name}` has dtype {:?}, expected {dtype:?}",
                spec.dtype
            )));
        }
        if spec.shape != shape {
            return Err(FloodError::Shape(format!(
                "array `{name}` declared as {:?}, counts imply {shape:?}",
                spec.shape
            )));
        }
        Ok((self.root.join(&spec.file), shape.iter().product()))
    }

    fn f32(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (path, len) = self.spec(name, DType::F32, shape)?;
        read_f32(&path, len)
    }

    fn i32(&self, name: &str, shape: &[usize], bound: usize) -> Result<Vec<usize>> {
        let (path, len) = self.spec(name, DType::I32, shape)?;
        read_i32(&path, len, bound)
    }

    fn declared(&self, name: &str) -> Option<&ArraySpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Array2<f32> {
    Array2::from_shape_vec((rows, cols), data).expect("length checked against shape")
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let m = read_manifest(root)?;
    let (n, e) = (m.num_nodes, m.num_edges);
    if m.events.len() != m.num_events {
        return Err(FloodError::Shape(format!(
            "manifest lists {} events but declares {}",
            m.events.len(),
            m.num_events
        )));
    }
    let r = Reader {
        root,
        specs: &m.graph_arrays,
    };
    let fnode = m.node_features.len();
    let fedge = m.edge_features.len();
    let index = r.i32("edge_index", &[2, e], n)?;
    let edges = index[..e].iter().copied().zip(index[e..].iter().copied()).collect();
    let snf = matrix(n, fnode, r.f32("static_node_features", &[n, fnode])?);
    let sef = matrix(e, fedge, r.f32("static_edge_features", &[e, fedge])?);
    let n_in = r.declared("inflow_nodes").map_or(0, |s| s.shape.first().copied().unwrap_or(0));
    let n_out = r.declared("outflow_nodes").map_or(0, |s| s.shape.first().copied().unwrap_or(0));
    let inflow_nodes = r.i32("inflow_nodes", &[n_in], n)?;
    let outflow_nodes = r.i32("outflow_nodes", &[n_out], n)?;
    let offsets = r.i32("depth_curve_offsets", &[n + 1], usize::MAX >> 1)?;
    let k = *offsets.last().unwrap_or(&0);
    let volumes = r.f32("depth_curve_volumes", &[k])?;
    let depths = r.f32("depth_curve_depths", &[k])?;
    let mut depth_curves = Vec::with_capacity(n);
    for w in offsets.windows(2) {
        if w[1] < w[0] || w[1] > k {
            return Err(FloodError::corrupt(root, "depth curve offsets are not monotone"));
        }
        depth_curves.push(DepthCurve::new(
            volumes[w[0]..w[1]].to_vec(),
            depths[w[0]..w[1]].to_vec(),
        )?);
    }
    let positions = match r.declared("node_positions") {
        Some(_) => Some(matrix(n, 2, r.f32("node_positions", &[n, 2])?)),
        None => None,
    };
    let graph = FloodGraph::new(GraphParts {
        num_nodes: n,
        edges,
        static_node_features: snf,
        node_feature_names: m.node_features.iter().map(|f| f.name.clone()).collect(),
        static_edge_features: sef,
        edge_feature_names: m.edge_features.iter().map(|f| f.name.clone()).collect(),
        inflow_nodes,
        outflow_nodes,
        depth_curves,
        positions,
    })
    .map_err(|err| FloodError::corrupt(root, err.to_string()))?;

    let mut events = Vec::with_capacity(m.events.len());
    for entry in &m.events {
        let r = Reader {
            root,
            specs: &entry.arrays,
        };
        let s = entry.num_steps;
        let ev = EventSeries {
            dt: entry.dt_seconds,
            node_volume: matrix(s, n, r.f32("node_volume", &[s, n])?),
            edge_flow: matrix(s, e, r.f32("edge_flow", &[s, e])?),
            rainfall: matrix(s, n, r.f32("rainfall", &[s, n])?),
            inflow_bc: r.f32("inflow_bc", &[s])?,
            outflow_bc: r.f32("outflow_bc", &[s])?,
        };
        ev.validate(&graph)
            .map_err(|err| FloodError::corrupt(root, format!("{}: {err}", entry.id)))?;
        events.push(ev);
    }
    Ok(Dataset {
        graph,
        events,
        generator: m.generator,
    })
}
