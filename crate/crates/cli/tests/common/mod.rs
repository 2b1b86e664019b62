#![allow(dead_code)]

use std::path::Path;

use dualflood::graph::{FloodGraph, GraphParts};
use std::process::{Command, Output};

pub fn dualflood(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualflood"))
        .args(args)
        .env("DUALFLOOD_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn ok(root: &Path, args: &[&str]) -> Output {
    let out = dualflood(root, args);
    assert_eq!(
        code(&out),
        0,
        "dualflood {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A 30-node, 4-event dataset at `<root>/data`.
pub fn tiny_dataset(root: &Path) {
    ok(root, &["gen-data", "--events", "4", "--nodes", "30", "--steps", "16", "--seed", "5"]);
}

pub const TINY_TRAIN: &[&str] = &[
    "train",
    "--latent-dim",
    "8",
    "--gnn-layers",
    "1",
    "--target-horizon",
    "2",
    "--patience",
    "1",
    "--max-train-windows",
    "6",
];

pub fn graph_parts(g: &FloodGraph) -> GraphParts {
    GraphParts {
        num_nodes: g.num_nodes(),
        edges: g.edges().collect(),
        static_node_features: g.static_node_features().clone(),
        node_feature_names: g.node_feature_names().to_vec(),
        static_edge_features: g.static_edge_features().clone(),
        edge_feature_names: g.edge_feature_names().to_vec(),
        inflow_nodes: g.inflow_nodes().to_vec(),
        outflow_nodes: g.outflow_nodes().to_vec(),
        depth_curves: g.depth_curves().to_vec(),
        positions: g.positions().cloned(),
    }
}
