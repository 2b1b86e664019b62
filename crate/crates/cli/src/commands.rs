use std::fs;
use std::path::{Path, PathBuf};

use dualflood::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
use dualflood::container::{load_dataset, save_dataset, Dataset};
use dualflood::dataset::{fit_normalizer, EventSeries};
use dualflood::eval::{
    aggregate, evaluate_events, event_report, rollout, write_event_report, write_matrix_csv, AggregateReport,
    MetricsReport,
};
use dualflood::losses::PhysicsMode;
use dualflood::model::{init_model, DualFlood, ModelConfig, OracleStub, Predictor};
use dualflood::synthetic::{generate_catchment, generate_event};
use dualflood::train::{checkpoint_dir, train, TrainData, TrainStart};
use dualflood::FloodError;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    read_config, EvalConfig, FormatVersions, GenConfig, ModelKindArg, PhysicsArg, Resolved, Split, TrainRunConfig,
};
use crate::{Cli, CliError, Command, EvalArgs, GenDataArgs, ReportArgs, RolloutArgs, TrainArgs};

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Rollout(a) => rollout_cmd(cli, a),
        Command::Report(a) => report_cmd(cli, a),
    })
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Flood(FloodError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates `dir`, refusing to touch a non-empty one unless `force` is set,
/// in which case its previous contents are removed.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    let occupied = dir.exists() && fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
    if occupied {
        if !force {
            return Err(CliError::Config(format!(
                "{} exists; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FloodError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_resolved<T: Serialize>(dir: &Path, command: &str, inputs: Vec<PathBuf>, config: &T) -> CliResult<()> {
    write_json(
        &dir.join("resolved_config.json"),
        &Resolved {
            command: command.into(),
            formats: FormatVersions::default(),
            inputs,
            config,
        },
    )
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CliResult<()> {
    let mut cfg: GenConfig = read_config(a.config.as_deref())?;
    if let Some(n) = a.events {
        cfg.events = n;
    }
    if let Some(n) = a.nodes {
        cfg.catchment.num_nodes = n;
    }
    if let Some(s) = a.steps {
        cfg.hydrograph.num_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.catchment.seed = s;
        cfg.hydrograph.seed = s;
    }
    if cfg.events == 0 {
        return Err(CliError::Config("--events must be positive".into()));
    }
    cfg.catchment.validate()?;
    cfg.hydrograph.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cli.output_root.join("data"));
    prepare_out(&out, a.force)?;

    let graph = generate_catchment(&cfg.catchment)?;
    log::info!(
        "catchment: {} nodes, {} edges; generating {} events",
        graph.num_nodes(),
        graph.num_edges(),
        cfg.events
    );
    let specs: Vec<_> = (0..cfg.events as u64).map(|i| cfg.hydrograph.perturbed(cfg.seed, i)).collect();
    let events = specs
        .par_iter()
        .map(|s| generate_event(&graph, s))
        .collect::<Result<Vec<_>, _>>()?;
    let generator = serde_json::json!({
        "config": cfg,
        "event_specs": specs,
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    save_dataset(&out, &graph, &events, Some(generator))?;
    write_resolved(&out, "gen-data", Vec::new(), &cfg)?;
    println!("wrote {} events to {}", events.len(), out.display());
    Ok(())
}

fn physics_mode(p: PhysicsArg) -> PhysicsMode {
    match p {
        PhysicsArg::Both => PhysicsMode::Both,
        PhysicsArg::Global => PhysicsMode::Global,
        PhysicsArg::Local => PhysicsMode::Local,
        PhysicsArg::None => PhysicsMode::None,
    }
}

fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainRunConfig> {
    let mut cfg: TrainRunConfig = read_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.max_epochs, t.max_epochs);
    set!(a.target_horizon, t.target_horizon);
    set!(a.curriculum_step, t.curriculum_step);
    set!(a.lr, t.learning_rate);
    set!(a.lr_decay, t.lr_decay);
    set!(a.patience, t.patience);
    set!(a.batch_size, t.batch_size);
    if a.max_train_windows.is_some() {
        t.max_train_windows = a.max_train_windows;
    }
    if let Some(s) = a.seed {
        t.seed = s;
        cfg.model.seed = s;
        cfg.split.seed = s;
    }
    set!(a.latent_dim, cfg.model.latent_dim);
    set!(a.gnn_layers, cfg.model.gnn_layers);
    set!(a.mlp_layers, cfg.model.mlp_layers);
    set!(a.history, cfg.features.history);
    set!(a.model_kind, cfg.model_kind);
    set!(a.physics, cfg.physics);
    if a.folds.is_some() {
        cfg.split.folds = a.folds;
    }
    if a.no_inflow_feature {
        cfg.features.boundary_channels = false;
    }
    cfg.train.weights = cfg.train.weights.with_physics(physics_mode(cfg.physics));
    cfg.train.validate()?;
    cfg.split.validate()?;
    Ok(cfg)
}

fn pick(events: &[EventSeries], idx: &[usize]) -> CliResult<Vec<EventSeries>> {
    idx.iter()
        .map(|&i| {
            events
                .get(i)
                .cloned()
                .ok_or_else(|| CliError::Flood(FloodError::Schema(format!("split refers to missing event {i}"))))
        })
        .collect()
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_train_config(a)?;
    let data_dir = a.data.clone().unwrap_or_else(|| cli.output_root.join("data"));
    let out = a.out.clone().unwrap_or_else(|| cli.output_root.join("train"));
    let data = load_dataset(&data_dir)?;
    let n = data.events.len();
    match cfg.split.folds {
        None => train_one(&cfg, &data, &data_dir, &out, cfg.split.split(n), a),
        Some(k) => {
            if !a.resume {
                prepare_out(&out, a.force)?;
            }
            write_resolved(&out, "train", vec![data_dir.clone()], &cfg)?;
            for fold in 0..k {
                let split = cfg.split.fold(n, k, fold)?;
                log::info!("fold {fold}/{k}: test events {:?}", split.test);
                train_one(&cfg, &data, &data_dir, &out.join(format!("fold_{fold}")), split, a)?;
            }
            Ok(())
        }
    }
}

fn train_one(cfg: &TrainRunConfig, data: &Dataset, data_dir: &Path, out: &Path, split: Split, a: &TrainArgs) -> CliResult<()> {
    let graph = &data.graph;
    let start = if a.resume {
        let saved: Resolved<TrainRunConfig> = serde_json::from_str(
            &fs::read_to_string(out.join("resolved_config.json")).map_err(|e| io_err(out, e))?,
        )
        .map_err(|e| CliError::Config(format!("unreadable resolved config in {}: {e}", out.display())))?;
        if saved.config != *cfg {
            return Err(CliError::Config("resume requires the same configuration as the original run".into()));
        }
        let ckpt = load_checkpoint(&checkpoint_dir(out, "last"))?;
        Some(ckpt)
    } else {
        prepare_out(out, a.force)?;
        None
    };
    write_resolved(out, "train", vec![data_dir.to_path_buf()], cfg)?;
    write_json(&out.join("split.json"), &split)?;

    if cfg.model_kind == ModelKindArg::Oracle {
        let ck = Checkpoint::oracle(cfg.features);
        save_checkpoint(&checkpoint_dir(out, "best"), &ck)?;
        save_checkpoint(&checkpoint_dir(out, "last"), &ck)?;
        println!("wrote oracle checkpoint to {}", out.display());
        return Ok(());
    }

    let train_events = pick(&data.events, &split.train)?;
    let val_events = pick(&data.events, &split.val)?;
    let stats = fit_normalizer(&train_events, graph, cfg.features)?;
    let start = match start {
        Some(ck) => TrainStart::Resume(Box::new(ck)),
        None => {
            let m = &cfg.model;
            let mc = ModelConfig {
                latent_dim: m.latent_dim,
                gnn_layers: m.gnn_layers,
                mlp_layers: m.mlp_layers,
                edge_update: m.edge_update,
                neighborhood: m.neighborhood,
                seed: m.seed,
                ..ModelConfig::for_graph(graph, cfg.features)
            };
            TrainStart::Fresh(init_model(mc)?)
        }
    };
    let outcome = train(
        &TrainData {
            graph,
            train: &train_events,
            val: &val_events,
            stats: &stats,
        },
        &cfg.train,
        start,
        Some(out),
    )?;
    if !checkpoint_dir(out, "best").exists() {
        // the epoch cap ended training before the target horizon
        let last = load_checkpoint(&checkpoint_dir(out, "last"))?;
        save_checkpoint(&checkpoint_dir(out, "best"), &last)?;
    }
    let last = outcome.history.last();
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "epochs": outcome.history.len(),
            "converged": outcome.converged,
            "final_horizon": outcome.curriculum.horizon,
            "final_val_loss": last.map(|r| r.val.l_total),
            "final_train_loss": last.map(|r| r.train.l_total),
        }),
    )?;
    println!(
        "trained {} epochs (horizon {}, converged: {}) into {}",
        outcome.history.len(),
        outcome.curriculum.horizon,
        outcome.converged,
        out.display()
    );
    Ok(())
}

fn default_checkpoint(cli: &Cli, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| {
        let best = checkpoint_dir(&cli.output_root.join("train"), "best");
        if best.exists() {
            best
        } else {
            checkpoint_dir(&cli.output_root.join("train"), "last")
        }
    })
}

/// Builds per-event predictors from a checkpoint after checking that its
/// input schema fits the dataset's graph.
struct PredictorSource {
    ckpt: Checkpoint,
}

impl PredictorSource {
    fn new(ckpt: Checkpoint, data: &Dataset) -> CliResult<Self> {
        if let (Some(m), Some(stats)) = (&ckpt.model, &ckpt.stats) {
            m.config.check_graph(&data.graph)?;
            if stats.node.width() != m.config.node_inputs || stats.edge.width() != m.config.edge_inputs {
                return Err(FloodError::Schema("checkpoint statistics disagree with its model".into()).into());
            }
        }
        Ok(Self { ckpt })
    }

    fn make(&self, truth: &EventSeries) -> Result<Box<dyn Predictor + Send>, FloodError> {
        match self.ckpt.kind {
            ModelKind::Oracle => Ok(Box::new(OracleStub {
                truth: truth.clone(),
                features: self.ckpt.features,
            })),
            ModelKind::Dualflood => Ok(Box::new(DualFlood {
                state: self.ckpt.model.clone().expect("dualflood checkpoints hold a model"),
                stats: self.ckpt.stats.clone().expect("dualflood checkpoints hold statistics"),
            })),
        }
    }
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let mut cfg: EvalConfig = read_config(a.config.as_deref())?;
    if let Some(s) = &a.split {
        cfg.split = s.clone();
    }
    if a.horizon.is_some() {
        cfg.horizon = a.horizon;
    }
    if let Some(t) = &a.thresholds {
        cfg.thresholds = t.clone();
    }
    let ckpt_path = default_checkpoint(cli, &a.checkpoint);
    let data_dir = a.data.clone().unwrap_or_else(|| cli.output_root.join("data"));
    let out = a.out.clone().unwrap_or_else(|| cli.output_root.join("eval"));

    let ckpt = load_checkpoint(&ckpt_path)?;
    let data = load_dataset(&data_dir)?;
    let source = PredictorSource::new(ckpt, &data)?;
    let indices = if cfg.split == "all" {
        (0..data.events.len()).collect()
    } else {
        let split_path = a.split_file.clone().unwrap_or_else(|| {
            ckpt_path
                .parent()
                .and_then(Path::parent)
                .unwrap_or(Path::new("."))
                .join("split.json")
        });
        let split: Split = serde_json::from_str(&fs::read_to_string(&split_path).map_err(|e| io_err(&split_path, e))?)
            .map_err(|e| FloodError::Json {
                path: split_path.clone(),
                source: e,
            })?;
        split.get(&cfg.split, data.events.len())?
    };
    let events = pick(&data.events, &indices)?;
    if events.is_empty() {
        return Err(CliError::Config(format!("split {:?} is empty", cfg.split)));
    }
    prepare_out(&out, a.force)?;
    write_resolved(&out, "eval", vec![ckpt_path.clone(), data_dir.clone()], &cfg)?;

    let results = evaluate_events(|ev| source.make(ev), &data.graph, &events, cfg.horizon, &cfg.thresholds)?;
    let mut reports = Vec::with_capacity(results.len());
    for (&idx, (_, report, map)) in indices.iter().zip(&results) {
        write_event_report(&out.join(format!("event_{idx:03}")), &data.graph, report, map)?;
        reports.push(report.clone());
    }
    let agg = aggregate(&reports);
    write_json(&out.join("aggregate.json"), &agg)?;
    print!("{}", summary_table(&agg));
    Ok(())
}

fn rollout_cmd(cli: &Cli, a: &RolloutArgs) -> CliResult<()> {
    let ckpt_path = default_checkpoint(cli, &a.checkpoint);
    let data_dir = a.data.clone().unwrap_or_else(|| cli.output_root.join("data"));
    let out = a.out.clone().unwrap_or_else(|| cli.output_root.join("rollout"));
    let data = load_dataset(&data_dir)?;
    let source = PredictorSource::new(load_checkpoint(&ckpt_path)?, &data)?;
    let event = data
        .events
        .get(a.event)
        .ok_or_else(|| CliError::Config(format!("event {} out of range ({} events)", a.event, data.events.len())))?;
    let predictor = source.make(event)?;
    let start = a.start.unwrap_or(predictor.features().history);
    let horizon = a.horizon.unwrap_or_else(|| event.num_steps().saturating_sub(start + 1));
    let thresholds = a.thresholds.clone().unwrap_or_else(|| dualflood::eval::DEFAULT_THRESHOLDS.to_vec());
    let result = rollout(predictor.as_ref(), &data.graph, event, start, horizon)?;
    prepare_out(&out, a.force)?;
    write_resolved(
        &out,
        "rollout",
        vec![ckpt_path, data_dir],
        &serde_json::json!({ "event": a.event, "start": start, "horizon": horizon, "thresholds": thresholds }),
    )?;
    write_matrix_csv(&out.join("predicted_volume.csv"), "node_", start, result.node_volume.view())?;
    write_matrix_csv(&out.join("predicted_flow.csv"), "edge_", start, result.edge_flow.view())?;
    write_matrix_csv(&out.join("predicted_depth.csv"), "node_", start, result.depth.view())?;
    let (report, map) = event_report(&result, event, &data.graph, &thresholds)?;
    write_event_report(&out, &data.graph, &report, &map)?;
    println!(
        "rolled out event {} for {horizon} steps in {:.3}s; NSE volume {} flow {}",
        a.event,
        result.inference_seconds,
        fmt_opt(report.volume.nse.mean),
        fmt_opt(report.flow.nse.mean)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

fn summary_table(agg: &AggregateReport) -> String {
    let mut s = format!("| metric | mean | std | n |\n|---|---|---|---|\n");
    for (name, m) in &agg.metrics {
        s.push_str(&format!("| {name} | {:.6} | {:.6} | {} |\n", m.mean, m.std, m.count));
    }
    s
}

fn report_cmd(cli: &Cli, a: &ReportArgs) -> CliResult<()> {
    let dir = a.eval_dir.clone().unwrap_or_else(|| cli.output_root.join("eval"));
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(FloodError::Schema(format!("no event reports under {}", dir.display())).into());
    }
    let mut reports = Vec::with_capacity(entries.len());
    for p in &entries {
        let path = p.join("metrics.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let r: MetricsReport = serde_json::from_str(&text).map_err(|e| FloodError::Json { path, source: e })?;
        reports.push(r);
    }
    let agg = aggregate(&reports);
    let mut table = format!("# Evaluation summary\n\n{} events\n\n", agg.events);
    table.push_str(&summary_table(&agg));
    fs::write(dir.join("summary.md"), &table).map_err(|e| io_err(&dir, e))?;
    write_json(&dir.join("aggregate.json"), &agg)?;
    print!("{table}");
    Ok(())
}
