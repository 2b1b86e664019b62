mod common;

use std::fs;

use common::*;
use dualflood::checkpoint::load_checkpoint;
use dualflood::container::{load_dataset, save_dataset};
use dualflood::graph::FloodGraph;

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_dataset(a.path());
    tiny_dataset(b.path());
    let da = load_dataset(&a.path().join("data")).unwrap();
    let db = load_dataset(&b.path().join("data")).unwrap();
    assert_eq!(da, db);
    assert_eq!(da.events.len(), 4);
    assert_eq!(da.events[0].num_steps(), 16);
    assert_eq!(da.graph.num_nodes(), 30);
    let generator = da.generator.unwrap();
    assert_eq!(generator["config"]["seed"], 5);

    let again = dualflood(a.path(), &["gen-data", "--events", "4", "--nodes", "30", "--steps", "16", "--seed", "5"]);
    assert_eq!(code(&again), 2);
    ok(a.path(), &["gen-data", "--events", "4", "--nodes", "30", "--steps", "16", "--seed", "5", "--force"]);
    assert_eq!(load_dataset(&a.path().join("data")).unwrap(), db);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"events": 3, "catchment": {"num_nodes": 12}, "hydrograph": {"num_steps": 9}}"#).unwrap();
    ok(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--nodes", "14"]);
    let d = load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!((d.events.len(), d.graph.num_nodes(), d.events[0].num_steps()), (3, 14, 9));
    let resolved = read_json(&dir.path().join("data/resolved_config.json"));
    assert_eq!(resolved["config"]["catchment"]["num_nodes"], 14);
    assert_eq!(resolved["formats"]["dataset"], "1");

    fs::write(&cfg, "{ nope").unwrap();
    let out = dualflood(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&out), 2);
    let out = dualflood(dir.path(), &["train", "--lr-decay", "0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualflood(dir.path(), TINY_TRAIN);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_rollout_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_dataset(root);
    ok(root, TINY_TRAIN);
    let run = root.join("train");
    for f in ["resolved_config.json", "split.json", "training_log.csv", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("checkpoints/last/manifest.json").exists());
    assert!(run.join("checkpoints/best/manifest.json").exists());

    ok(root, &["eval", "--split", "test"]);
    let agg = read_json(&root.join("eval/aggregate.json"));
    assert_eq!(agg["events"], 1);
    let split = read_json(&run.join("split.json"));
    let test_idx = split["test"][0].as_u64().unwrap();
    let event_dir = root.join(format!("eval/event_{test_idx:03}"));
    for f in ["metrics.json", "per_timestep_rmse.csv", "max_depth_map.csv", "per_timestep_rmse.png", "max_depth_map.png"] {
        assert!(event_dir.join(f).exists(), "{f}");
    }

    ok(root, &["rollout", "--event", "1", "--horizon", "5"]);
    let csv = fs::read_to_string(root.join("rollout/predicted_volume.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(csv.lines().next().unwrap().starts_with("step,node_0"));

    let out = ok(root, &["report"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("volume.nse"));
    assert!(root.join("eval/summary.md").exists());
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_dataset(root);
    ok(root, &["train", "--model-kind", "oracle", "--out", root.join("oracle").to_str().unwrap()]);
    ok(
        root,
        &["eval", "--checkpoint", root.join("oracle/checkpoints/best").to_str().unwrap(), "--split", "all", "--workers", "2"],
    );
    let agg = read_json(&root.join("eval/aggregate.json"));
    assert_eq!(agg["events"], 4);
    for key in ["volume.nse", "flow.nse", "depth.nse", "csi@0.05", "csi@0.3"] {
        assert_eq!(agg["metrics"][key]["mean"], 1.0, "{key}");
        assert_eq!(agg["metrics"][key]["std"], 0.0, "{key}");
    }
    assert_eq!(agg["metrics"]["volume.rmse"]["mean"], 0.0);
}

#[test]
fn incompatible_schema_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_dataset(root);
    ok(root, TINY_TRAIN);
    // one extra static node feature changes f_v
    let d = load_dataset(&root.join("data")).unwrap();
    let mut parts = graph_parts(&d.graph);
    let n = parts.num_nodes;
    parts.static_node_features = ndarray::concatenate(
        ndarray::Axis(1),
        &[parts.static_node_features.view(), ndarray::Array2::<f32>::ones((n, 1)).view()],
    )
    .unwrap();
    parts.node_feature_names.push("roughness".into());
    let wide = root.join("wide");
    save_dataset(&wide, &FloodGraph::new(parts).unwrap(), &d.events, None).unwrap();
    let out = dualflood(root, &["eval", "--data", wide.to_str().unwrap(), "--split", "all"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_dataset(root);
    let base = TINY_TRAIN.to_vec();
    let run = |out: &str, epochs: &str, resume: bool| {
        let mut args = base.clone();
        args.extend(["--out", out, "--max-epochs", epochs]);
        if resume {
            args.push("--resume");
        }
        dualflood(root, &args)
    };
    let full = root.join("full");
    let part = root.join("part");
    assert_eq!(code(&run(full.to_str().unwrap(), "4", false)), 0);
    assert_eq!(code(&run(part.to_str().unwrap(), "2", false)), 0);
    // resuming under a different configuration is refused
    assert_eq!(code(&run(part.to_str().unwrap(), "4", true)), 2);
    fs::copy(full.join("resolved_config.json"), part.join("resolved_config.json")).unwrap();
    assert_eq!(code(&run(part.to_str().unwrap(), "4", true)), 0);
    assert_eq!(
        fs::read_to_string(full.join("training_log.csv")).unwrap(),
        fs::read_to_string(part.join("training_log.csv")).unwrap()
    );
    let a = load_checkpoint(&full.join("checkpoints/last")).unwrap();
    let b = load_checkpoint(&part.join("checkpoints/last")).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.training, b.training);
}

#[test]
fn folds_train_one_run_per_fold() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_dataset(root);
    let mut args = TINY_TRAIN.to_vec();
    args.extend(["--folds", "3", "--max-epochs", "1"]);
    ok(root, &args);
    let mut tested = Vec::new();
    for k in 0..3 {
        let split = read_json(&root.join(format!("train/fold_{k}/split.json")));
        tested.extend(split["test"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()));
        assert!(root.join(format!("train/fold_{k}/checkpoints/best")).exists());
    }
    tested.sort_unstable();
    tested.dedup();
    assert_eq!(tested, vec![0, 1, 2, 3]);
}

#[test]
fn divergence_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_dataset(root);
    let mut args = TINY_TRAIN.to_vec();
    args.extend(["--max-epochs", "3", "--lr", "1e300"]);
    let out = dualflood(root, &args);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
