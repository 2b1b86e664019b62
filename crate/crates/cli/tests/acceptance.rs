//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; run with
//! `cargo test -p dualflood-cli --test acceptance -- --nocapture` to see them.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use dualflood::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingSnapshot};
use dualflood::container::{load_dataset, save_dataset};
use dualflood::dataset::{fit_normalizer, ColumnStats, EventSeries, FeatureConfig, NormStats};
use dualflood::eval::{confusion, csi, event_report, mae, nse, rmse, rollout};
use dualflood::graph::{compute_node_fluxes, FloodGraph, GraphParts};
use dualflood::losses::{global_residual, local_residuals, LossWeights, PhysicsConfig, PhysicsMode, StepForcing};
use dualflood::model::{forward_step, init_model, DualFlood, EdgeUpdate, ModelConfig, ModelState, Neighborhood};
use dualflood::synthetic::{conservation_report, generate_catchment, generate_event, CatchmentSpec, HydrographSpec};
use dualflood::tape::Tape;
use dualflood::train::{
    curriculum_step, read_training_log, rollout_gradients, rollout_loss_value, train, training_rollout, AdamState,
    CurriculumState, RolloutContext, TrainConfig, TrainData, TrainStart, Transition,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn catchment(nodes: usize, seed: u64) -> FloodGraph {
    generate_catchment(&CatchmentSpec {
        num_nodes: nodes,
        seed,
        ..CatchmentSpec::default()
    })
    .unwrap()
}

fn event(graph: &FloodGraph, steps: usize, seed: u64) -> EventSeries {
    generate_event(
        graph,
        &HydrographSpec {
            num_steps: steps,
            seed,
            ..HydrographSpec::default()
        },
    )
    .unwrap()
}

fn small_model(graph: &FloodGraph, d: usize, layers: usize, seed: u64) -> ModelState {
    init_model(ModelConfig {
        latent_dim: d,
        gnn_layers: layers,
        seed,
        ..ModelConfig::for_graph(graph, FeatureConfig::default())
    })
    .unwrap()
}

// 1
fn conservation() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = vec![(CatchmentSpec::default(), HydrographSpec::default())];
    for _ in 0..5 {
        let seed = rng.gen::<u64>();
        cases.push((
            CatchmentSpec {
                num_nodes: rng.gen_range(30..=1129),
                seed,
                ..CatchmentSpec::default()
            },
            HydrographSpec {
                seed,
                ..HydrographSpec::default()
            },
        ));
    }
    let worst: Vec<(usize, f64)> = cases
        .par_iter()
        .map(|(c, h)| {
            let g = generate_catchment(c).unwrap();
            let ev = generate_event(&g, h).unwrap();
            (g.num_nodes(), conservation_report(&g, &ev).unwrap().max_relative())
        })
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let sizes: Vec<usize> = worst.iter().map(|w| w.0).collect();
    ensure(max <= 1e-4, || format!("relative residual {max:.3e} > 1e-4 (nodes {sizes:?})"))?;
    ensure(secs <= 120.0, || format!("took {secs:.1}s > 120s"))?;
    Ok(format!("max relative residual {max:.2e} over nodes {sizes:?} in {secs:.1}s"))
}

// 2
fn flux_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = rng.gen_range(2..200);
        let m = rng.gen_range(1..4 * n);
        let edges: Vec<(usize, usize)> = (0..m)
            .map(|_| {
                let s = rng.gen_range(0..n);
                let d = (s + rng.gen_range(1..n)) % n;
                (s, d)
            })
            .collect();
        let graph = FloodGraph::new_unchecked(GraphParts {
            num_nodes: n,
            edges,
            static_node_features: Array2::zeros((n, 0)),
            node_feature_names: vec![],
            static_edge_features: Array2::zeros((m, 0)),
            edge_feature_names: vec![],
            inflow_nodes: vec![0],
            outflow_nodes: vec![n - 1],
            depth_curves: vec![dualflood::graph::DepthCurve::prism(1.0); n],
            positions: None,
        });
        let q: Vec<f64> = (0..m)
            .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(-50.0..50.0) })
            .collect();
        let (inflow, outflow) = compute_node_fluxes(&graph, &q).unwrap();
        let total_abs: f64 = q.iter().map(|v| v.abs()).sum();
        let (sin, sout): (f64, f64) = (inflow.iter().sum(), outflow.iter().sum());
        for s in [sin, sout] {
            let e = if total_abs == 0.0 { s.abs() } else { rel(s, total_abs) };
            worst = worst.max(e);
            ensure(e <= 1e-9, || format!("trial {trial}: sum {s} vs Σ|Q| {total_abs}"))?;
        }
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        let (nin, nout) = compute_node_fluxes(&graph, &neg).unwrap();
        ensure(nin == outflow && nout == inflow, || format!("trial {trial}: negation is not an exact swap"))?;
    }
    Ok(format!("100 instances, worst relative sum error {worst:.1e}, negation swaps exactly"))
}

// 3
/// Central differences against the tape. A component is compared with
/// relative error over `max(|a|, |n|, 1e-6 * max(1, |loss|))`, the floor
/// sitting above the roundoff of a difference quotient. Components whose two
/// one-sided quotients disagree straddle a ReLU kink and are reported apart.
fn gradients() -> Outcome {
    let t0 = Instant::now();
    let graph = catchment(8, 3);
    let ev = event(&graph, 10, 3);
    let stats = fit_normalizer(std::slice::from_ref(&ev), &graph, FeatureConfig::default()).unwrap();
    let state = init_model(ModelConfig {
        latent_dim: 6,
        gnn_layers: 2,
        seed: 5,
        neighborhood: Neighborhood::Bidirectional,
        ..ModelConfig::for_graph(&graph, FeatureConfig::default())
    })
    .unwrap();
    let weights = LossWeights {
        node: 1.0,
        edge: 1.0,
        global: 0.3,
        local: 0.7,
    };
    let ctx = RolloutContext {
        graph: &graph,
        stats: &stats,
        weights: &weights,
        physics: PhysicsConfig::default(),
    };
    let start = FeatureConfig::default().history;
    let names = ["l_node", "l_edge", "l_global", "l_local", "l_total", "rollout3"];

    // single-step terms and the 3-step rollout, analytically
    let single = |s: &ModelState, grad: bool| -> (Vec<f64>, Vec<Vec<Array2<f64>>>) {
        let tape = Tape::new();
        let model = if grad { s.on_tape(&tape) } else { s.on_tape_frozen(&tape) };
        let out = training_rollout(&tape, &model, ctx, &ev, start, 1).unwrap();
        let st = out.steps[0];
        let vars = [st.node, st.edge, st.global, st.local, st.total];
        let values = vars.iter().map(|v| tape.scalar(*v)).collect();
        let grads = if grad {
            vars.iter()
                .map(|v| {
                    let g = tape.backward(*v);
                    model.vars.iter().map(|w| g.wrt(*w)).collect()
                })
                .collect()
        } else {
            vec![]
        };
        (values, grads)
    };
    let all = |s: &ModelState| -> Vec<f64> {
        let mut v = single(s, false).0;
        v.push(rollout_loss_value(s, ctx, &ev, start, 3).unwrap().0);
        v
    };

    // kink neighbourhoods of the loss itself at the base point
    {
        let mut distances = Vec::new();
        let p = DualFlood {
            state: state.clone(),
            stats: stats.clone(),
        };
        let r = rollout(&p, &graph, &ev, start, 3).unwrap();
        for k in 1..=3 {
            let t = start + k - 1;
            let dv: Vec<f64> = (0..graph.num_nodes()).map(|i| r.node_volume[[k, i]] - r.node_volume[[k - 1, i]]).collect();
            let q: Vec<f64> = r.edge_flow.row(k).to_vec();
            let forcing = StepForcing {
                rainfall: ev.rainfall.row(t).iter().map(|v| f64::from(*v)).collect(),
                inflow: f64::from(ev.inflow_bc[t]),
                outflow: f64::from(ev.outflow_bc[t]),
                dt: ev.dt,
            };
            let local = local_residuals(&graph, &dv, &q, &forcing).unwrap();
            distances.extend(q.iter().map(|v| v.abs()));
            distances.extend(local.iter().map(|v| v.abs()));
            distances.push(global_residual(&dv, &forcing).abs());
        }
        let nearest = distances.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(nearest >= 1e-8, || format!("base point sits on a loss kink ({nearest:.1e})"))?;
    }

    let (base_values, mut analytic) = single(&state, true);
    let (_, _, rollout_grad) = rollout_gradients(&state, ctx, &ev, start, 3).unwrap();
    analytic.push(rollout_grad);
    let mut base = base_values;
    base.push(rollout_loss_value(&state, ctx, &ev, start, 3).unwrap().0);

    let h = 1e-5;
    let mut worst = vec![0.0f64; names.len()];
    let mut kinks = 0usize;
    let mut compared = 0usize;
    let shapes: Vec<(usize, usize)> = state.weights().iter().map(|w| w.dim()).collect();
    for (wi, &(rows, cols)) in shapes.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = state.clone();
                plus.weights_mut()[wi][[r, c]] += h;
                let mut minus = state.clone();
                minus.weights_mut()[wi][[r, c]] -= h;
                let (fp, fm) = (all(&plus), all(&minus));
                for (li, name) in names.iter().enumerate() {
                    let numeric = (fp[li] - fm[li]) / (2.0 * h);
                    let a = analytic[li][wi][[r, c]];
                    let floor = 1e-6 * base[li].abs().max(1.0);
                    let fwd = (fp[li] - base[li]) / h;
                    let bwd = (base[li] - fm[li]) / h;
                    if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(floor) {
                        kinks += 1;
                        continue;
                    }
                    compared += 1;
                    let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                    worst[li] = worst[li].max(e);
                    ensure(e <= 1e-4, || {
                        format!("{name} d/d{}[{r},{c}]: tape {a:.9e} vs fd {numeric:.9e} (rel {e:.1e})", state.param_names()[wi])
                    })?;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(kinks * 100 <= compared, || format!("{kinks} kink crossings out of {compared} comparisons"))?;
    ensure(secs <= 300.0, || format!("took {secs:.1}s > 300s"))?;
    let summary: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!(
        "{} weights, worst rel error: {}; {kinks} ReLU-kink crossings skipped; {secs:.1}s",
        state.param_count(),
        summary.join(", ")
    ))
}

// 4
fn zero_propagation() -> Outcome {
    let source = catchment(20, 4);
    let mut parts = graph_parts(&source);
    parts.static_node_features.fill(0.0);
    parts.static_edge_features.fill(0.0);
    // zero areas fail physical validation but are exactly the input wanted here
    let graph = FloodGraph::new_unchecked(parts);
    let zero = EventSeries::zeros(&graph, 6, 900.0);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut nonzero_control = 0;
    for trial in 0..20u64 {
        let state = init_model(ModelConfig {
            latent_dim: rng.gen_range(4..24),
            gnn_layers: rng.gen_range(1..4),
            mlp_layers: rng.gen_range(1..4),
            edge_update: if rng.gen_bool(0.5) { EdgeUpdate::Residual } else { EdgeUpdate::Overwrite },
            neighborhood: if rng.gen_bool(0.5) { Neighborhood::Incoming } else { Neighborhood::Bidirectional },
            seed: rng.gen(),
            ..ModelConfig::for_graph(&graph, FeatureConfig::default())
        })
        .unwrap();
        let c = &state.config;
        let stats = NormStats {
            delta_volume: ColumnStats {
                mean: vec![0.0],
                std: vec![rng.gen_range(0.1..100.0)],
            },
            delta_flow: ColumnStats {
                mean: vec![0.0],
                std: vec![rng.gen_range(0.1..100.0)],
            },
            ..NormStats::identity(c.node_inputs, c.edge_inputs)
        };
        let out = forward_step(&state, &graph, &zero, 2, &stats).unwrap();
        ensure(out.delta_volume.iter().chain(&out.delta_flow).all(|v| *v == 0.0), || {
            format!("trial {trial}: non-zero output from zero input")
        })?;
        // the same weights respond to a non-zero input
        let mut poke = zero.clone();
        poke.node_volume[[2, 0]] = 1.0;
        let out = forward_step(&state, &graph, &poke, 2, &stats).unwrap();
        if out.delta_volume.iter().any(|v| *v != 0.0) {
            nonzero_control += 1;
        }
    }
    ensure(nonzero_control == 20, || format!("only {nonzero_control}/20 models react to input"))?;
    Ok("20 random initializations give exactly zero deltas".into())
}

// 5
fn equivariance_and_locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for trial in 0..10 {
        let graph = catchment(20, rng.gen());
        let ev = event(&graph, 6, rng.gen());
        let stats = fit_normalizer(std::slice::from_ref(&ev), &graph, FeatureConfig::default()).unwrap();
        let layers = rng.gen_range(1..4);
        let mut state = small_model(&graph, 8, layers, rng.gen());
        state.config.neighborhood = if trial % 2 == 0 { Neighborhood::Incoming } else { Neighborhood::Bidirectional };
        let n = graph.num_nodes();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = graph.permute_nodes(&perm);
        let mut pev = ev.clone();
        for (old, &new) in perm.iter().enumerate() {
            pev.node_volume.column_mut(new).assign(&ev.node_volume.column(old));
            pev.rainfall.column_mut(new).assign(&ev.rainfall.column(old));
        }
        let a = forward_step(&state, &graph, &ev, 3, &stats).unwrap();
        let b = forward_step(&state, &pg, &pev, 3, &stats).unwrap();
        ensure((0..n).all(|i| a.delta_volume[i] == b.delta_volume[perm[i]]), || {
            format!("trial {trial}: node outputs are not permuted exactly")
        })?;
        ensure(a.delta_flow == b.delta_flow, || format!("trial {trial}: edge outputs changed under relabelling"))?;
    }
    let mut reach_checked = 0;
    for trial in 0..10 {
        let graph = catchment(20, rng.gen());
        let ev = event(&graph, 6, rng.gen());
        let stats = fit_normalizer(std::slice::from_ref(&ev), &graph, FeatureConfig::default()).unwrap();
        let layers = rng.gen_range(1..4);
        let mut state = small_model(&graph, 8, layers, rng.gen());
        state.config.neighborhood = if trial % 2 == 0 { Neighborhood::Incoming } else { Neighborhood::Bidirectional };
        let j = rng.gen_range(0..graph.num_nodes());
        let dist = graph.hop_distances(j);
        let mut poked = ev.clone();
        poked.node_volume[[3, j]] += 500.0;
        let a = forward_step(&state, &graph, &ev, 3, &stats).unwrap();
        let b = forward_step(&state, &graph, &poked, 3, &stats).unwrap();
        let far = |i: usize, limit: usize| dist[i].map_or(true, |d| d > limit);
        for i in 0..graph.num_nodes() {
            if far(i, layers) {
                reach_checked += 1;
                ensure(a.delta_volume[i] == b.delta_volume[i], || {
                    format!("trial {trial}: node {i} at {:?} hops from {j} moved with L_GNN = {layers}", dist[i])
                })?;
            }
        }
        for (k, (s, d)) in graph.edges().enumerate() {
            if far(s, layers - 1) && far(d, layers - 1) {
                reach_checked += 1;
                ensure(a.delta_flow[k] == b.delta_flow[k], || {
                    format!("trial {trial}: edge {k} beyond L_GNN - 1 hops moved")
                })?;
            }
        }
        ensure(a.delta_volume[j] != b.delta_volume[j], || format!("trial {trial}: perturbed node did not react"))?;
    }
    ensure(reach_checked > 0, || "no node lay outside the receptive field".into())?;
    Ok(format!("10 permutation trials exact; 10 locality trials, {reach_checked} out-of-range outputs unchanged"))
}

// 6
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..20 {
        let len = rng.gen_range(2..80);
        let obs: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..40.0)).collect();
        ensure(nse(&obs, &obs).unwrap() == Some(1.0), || "perfect prediction NSE != 1".into())?;
        let mean = obs.iter().sum::<f64>() / len as f64;
        let flat = vec![mean; len];
        let z = nse(&flat, &obs).unwrap().unwrap();
        ensure(z.abs() <= 1e-12, || format!("mean prediction NSE = {z}"))?;

        let pred: Vec<f64> = obs.iter().map(|o| o + rng.gen_range(-3.0..3.0)).collect();
        let sq: f64 = pred.iter().zip(&obs).map(|(p, o)| (p - o) * (p - o)).sum();
        let ab: f64 = pred.iter().zip(&obs).map(|(p, o)| (p - o).abs()).sum();
        let (r, m) = (rmse(&pred, &obs).unwrap(), mae(&pred, &obs).unwrap());
        ensure(rel(r, (sq / len as f64).sqrt()) <= 1e-10, || format!("rmse {r}"))?;
        ensure(rel(m, ab / len as f64) <= 1e-10, || format!("mae {m}"))?;
    }
    for trial in 0..50 {
        let len = rng.gen_range(1..200);
        let tau = rng.gen_range(0.01..1.0);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len).map(|_| if rng.gen_bool(0.3) { tau } else { rng.gen_range(0.0..2.0 * tau) }).collect()
        };
        let (pred, obs) = (draw(&mut rng), draw(&mut rng));
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, o) in pred.iter().zip(&obs) {
            match (*p >= tau, *o >= tau) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let c = confusion(&pred, &obs, tau).unwrap();
        ensure((c.tp, c.fp, c.fn_) == (tp, fp, fneg), || format!("trial {trial}: counts {c:?}"))?;
        let want = if tp + fp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fp + fneg) as f64 };
        let got = csi(&pred, &obs, tau).unwrap();
        ensure(got == want, || format!("trial {trial}: csi {got} vs {want}"))?;
    }
    Ok("NSE degenerate cases, 50 CSI configurations and RMSE/MAE loop oracles agree".into())
}

// 7
fn curriculum() -> Outcome {
    let cfg = TrainConfig {
        target_horizon: 7,
        curriculum_step: 2,
        learning_rate: 3e-3,
        lr_decay: 0.5,
        patience: 2,
        max_epochs_per_stage: 50,
        ..TrainConfig::default()
    };
    // each stage improves three times, then plateaus
    let mut script = Vec::new();
    for stage in 0..4 {
        let base = 10.0 / (stage + 1) as f64;
        script.extend([base, base * 0.5, base * 0.25, base * 0.25, base * 0.25]);
    }
    let mut cur = CurriculumState::new(&cfg);
    let mut horizons = vec![cur.horizon];
    let mut transitions = Vec::new();
    for val in &script {
        let (next, why) = curriculum_step(&cur, *val, &cfg);
        ensure(next.horizon >= cur.horizon, || "horizon decreased".into())?;
        ensure(next.lr == 3e-3 * 0.5f64.powi(next.stage as i32), || format!("lr {} at stage {}", next.lr, next.stage))?;
        if let Some(t) = why {
            transitions.push(t);
            horizons.push(next.horizon);
        }
        cur = next;
        if cur.finished {
            break;
        }
    }
    ensure(horizons == vec![1, 3, 5, 7, 7], || format!("horizons {horizons:?}"))?;
    ensure(
        transitions == vec![Transition::Advance, Transition::Advance, Transition::Advance, Transition::Converged],
        || format!("transitions {transitions:?}"),
    )?;

    // resume replays an uninterrupted run
    let graph = catchment(16, 7);
    let events: Vec<EventSeries> = (0..2).map(|s| event(&graph, 12, s)).collect();
    let stats = fit_normalizer(&events, &graph, FeatureConfig::default()).unwrap();
    let data = TrainData {
        graph: &graph,
        train: &events,
        val: &events[1..],
        stats: &stats,
    };
    let run_cfg = TrainConfig {
        target_horizon: 3,
        patience: 1,
        max_epochs_per_stage: 2,
        batch_size: 4,
        max_epochs: 7,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let full = train(&data, &run_cfg, TrainStart::Fresh(small_model(&graph, 8, 2, 1)), Some(&dir.path().join("full"))).unwrap();
    let part_dir = dir.path().join("part");
    let short = TrainConfig {
        max_epochs: 3,
        ..run_cfg.clone()
    };
    train(&data, &short, TrainStart::Fresh(small_model(&graph, 8, 2, 1)), Some(&part_dir)).unwrap();
    let ck = load_checkpoint(&part_dir.join("checkpoints/last")).unwrap();
    let resumed = train(&data, &run_cfg, TrainStart::Resume(Box::new(ck)), Some(&part_dir)).unwrap();
    ensure(full.history == resumed.history, || "resumed history differs".into())?;
    ensure(full.state == resumed.state, || "resumed weights differ".into())?;
    let stages = full.history.last().map_or(0, |r| r.stage);
    ensure(stages >= 1 && resumed.history[2].stage < stages, || "resume did not span a stage change".into())?;
    Ok(format!(
        "horizons {horizons:?} with lr = lr0 * 0.5^stage; resume after 3 of {} epochs replays exactly ({} stages)",
        full.history.len(),
        stages + 1
    ))
}

// 8
fn overfit_smoke() -> Outcome {
    let t0 = Instant::now();
    let graph = catchment(30, 1);
    let ev = event(&graph, 65, 1);
    let features = FeatureConfig::default();
    let stats = fit_normalizer(std::slice::from_ref(&ev), &graph, features).unwrap();
    let state = small_model(&graph, 32, 2, 0);
    let cfg = TrainConfig {
        target_horizon: 4,
        curriculum_step: 1,
        learning_rate: 2e-3,
        patience: 40,
        max_epochs: 800,
        max_epochs_per_stage: 200,
        batch_size: 4,
        weights: LossWeights {
            global: 1e-5,
            local: 1e-5,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let data = TrainData {
        graph: &graph,
        train: std::slice::from_ref(&ev),
        val: std::slice::from_ref(&ev),
        stats: &stats,
    };
    let out = train(&data, &cfg, TrainStart::Fresh(state), None).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let p = DualFlood { state: out.state, stats };
    let r = rollout(&p, &graph, &ev, features.history, 32).unwrap();
    let (report, _) = event_report(&r, &ev, &graph, &[0.05]).unwrap();
    let nse_v = report.volume.nse.mean.unwrap_or(f64::NEG_INFINITY);
    let nse_q = report.flow.nse.mean.unwrap_or(f64::NEG_INFINITY);
    let csi05 = report.csi[0].csi;
    let line = format!(
        "NSE_V {nse_v:.3}, NSE_Q {nse_q:.3}, CSI@0.05 {csi05:.3} after {} epochs in {train_secs:.0}s",
        out.history.len()
    );
    ensure(nse_v >= 0.90 && nse_q >= 0.80 && csi05 >= 0.90, || line.clone())?;
    ensure(train_secs <= 600.0, || format!("{line}; over 10 minutes"))?;
    Ok(line)
}

// 9
fn ablation_plumbing(root: &Path) -> Outcome {
    tiny_dataset(root);
    let modes = [
        ("none", PhysicsMode::None),
        ("global", PhysicsMode::Global),
        ("local", PhysicsMode::Local),
        ("both", PhysicsMode::Both),
    ];
    let defaults = LossWeights::default();
    for (name, mode) in modes {
        let out = root.join(format!("physics_{name}"));
        let mut args = TINY_TRAIN.to_vec();
        args.extend(["--max-epochs", "3", "--physics", name, "--out", out.to_str().unwrap()]);
        ok(root, &args);
        let resolved = read_json(&out.join("resolved_config.json"));
        let w = &resolved["config"]["train"]["weights"];
        let want = defaults.with_physics(mode);
        ensure(
            w["global"].as_f64() == Some(want.global) && w["local"].as_f64() == Some(want.local),
            || format!("{name}: resolved weights {w}"),
        )?;
        ensure(w["node"].as_f64() == Some(1.0) && w["edge"].as_f64() == Some(1.0), || format!("{name}: {w}"))?;
        let log = read_training_log(&out.join("training_log.csv")).unwrap();
        ensure(!log.is_empty(), || format!("{name}: empty log"))?;
        for row in &log {
            for b in [row.train, row.val] {
                let expect = want.global * b.l_global + want.local * b.l_local;
                ensure(b.l_global > 0.0 && b.l_local > 0.0, || format!("{name}: residual terms not logged"))?;
                ensure((b.l_physics - expect).abs() <= 1e-12 * expect.abs().max(1e-300), || {
                    format!("{name}: l_physics {} vs {expect}", b.l_physics)
                })?;
                ensure((b.l_total - (b.l_pred + b.l_physics)).abs() <= 1e-12 * b.l_total.abs(), || {
                    format!("{name}: l_total {} vs {}", b.l_total, b.l_pred + b.l_physics)
                })?;
                if mode == PhysicsMode::None {
                    ensure(b.l_physics == 0.0 && b.l_total == b.l_pred, || "none: physics leaked into the total".into())?;
                }
            }
        }
    }
    let out = root.join("no_inflow");
    let mut args = TINY_TRAIN.to_vec();
    args.extend(["--max-epochs", "1", "--no-inflow-feature", "--out", out.to_str().unwrap()]);
    ok(root, &args);
    let resolved = read_json(&out.join("resolved_config.json"));
    ensure(resolved["config"]["features"]["boundary_channels"] == false, || "resolved features keep boundary channels".into())?;
    let manifest = read_json(&out.join("checkpoints/last/manifest.json"));
    ensure(manifest["features"]["boundary_channels"] == false, || "checkpoint features keep boundary channels".into())?;
    let with = load_checkpoint(&root.join("physics_both/checkpoints/last")).unwrap();
    let without = load_checkpoint(&out.join("checkpoints/last")).unwrap();
    let (a, b) = (with.model.unwrap().config, without.model.unwrap().config);
    ensure(a.node_inputs - b.node_inputs == 2 * (a.features.history + 1) && a.edge_inputs == b.edge_inputs, || {
        format!("f_v {} vs {}", a.node_inputs, b.node_inputs)
    })?;
    Ok(format!(
        "none/global/local/both logs match their λ pattern; --no-inflow-feature drops f_v {} -> {}",
        a.node_inputs, b.node_inputs
    ))
}

fn largest_bin(dir: &Path) -> std::path::PathBuf {
    let mut bins: Vec<_> = walk(dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "bin")).collect();
    bins.sort_by_key(|p| std::cmp::Reverse(fs::metadata(p).unwrap().len()));
    bins.remove(0)
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn set_version(manifest: &Path, key: &str) {
    let mut m = read_json(manifest);
    m[key] = "999".into();
    fs::write(manifest, serde_json::to_string_pretty(&m).unwrap()).unwrap();
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let p = entry.unwrap().path();
        let target = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_dir(&p, &target);
        } else {
            fs::copy(&p, &target).unwrap();
        }
    }
}

// 10
fn format_round_trips(root: &Path) -> Outcome {
    // library round trips
    let graph = catchment(40, 10);
    let events: Vec<EventSeries> = (0..3).map(|s| event(&graph, 20, s)).collect();
    let (a, b) = (root.join("ds_a"), root.join("ds_b"));
    save_dataset(&a, &graph, &events, Some(serde_json::json!({"seed": 10}))).unwrap();
    let loaded = load_dataset(&a).unwrap();
    ensure(loaded.graph == graph && loaded.events == events, || "dataset changed on reload".into())?;
    save_dataset(&b, &loaded.graph, &loaded.events, loaded.generator.clone()).unwrap();
    for f in walk(&a) {
        let g = b.join(f.strip_prefix(&a).unwrap());
        ensure(fs::read(&f).unwrap() == fs::read(&g).unwrap(), || format!("{} differs after re-save", f.display()))?;
    }

    let stats = fit_normalizer(&events, &graph, FeatureConfig::default()).unwrap();
    let state = small_model(&graph, 8, 2, 3);
    let weights = LossWeights::default();
    let ctx = RolloutContext {
        graph: &graph,
        stats: &stats,
        weights: &weights,
        physics: PhysicsConfig::default(),
    };
    let (_, _, grads) = rollout_gradients(&state, ctx, &events[0], 2, 2).unwrap();
    let mut trained = state.clone();
    let mut adam = AdamState::new(state.weights());
    adam.update(trained.weights_mut(), &grads, 1e-3, &Default::default());
    let cfg = TrainConfig::default();
    let ck = Checkpoint::trained(
        trained,
        stats,
        Some(TrainingSnapshot {
            config: cfg.clone(),
            curriculum: CurriculumState::new(&cfg),
            optimizer: adam,
            epoch: 1,
            history: vec![],
        }),
    );
    let ck_dir = root.join("ck");
    save_checkpoint(&ck_dir, &ck).unwrap();
    ensure(load_checkpoint(&ck_dir).unwrap() == ck, || "checkpoint changed on reload".into())?;

    // exit codes through the CLI
    tiny_dataset(root);
    let mut args = TINY_TRAIN.to_vec();
    args.extend(["--max-epochs", "1"]);
    ok(root, &args);
    let expect3 = |args: &[&str], what: &str| -> Result<(), String> {
        let out = dualflood(root, args);
        ensure(code(&out) == 3, || format!("{what}: exit {} ({})", code(&out), String::from_utf8_lossy(&out.stderr).trim()))
    };

    let data = root.join("data");
    let bad_version = root.join("data_version");
    copy_dir(&data, &bad_version);
    set_version(&bad_version.join("manifest.json"), "format_version");
    expect3(&["eval", "--data", bad_version.to_str().unwrap(), "--split", "all", "--force"], "dataset version")?;

    let corrupt = root.join("data_corrupt");
    copy_dir(&data, &corrupt);
    let blob = largest_bin(&corrupt);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    expect3(&["eval", "--data", corrupt.to_str().unwrap(), "--split", "all", "--force"], "truncated dataset")?;

    let last = root.join("train/checkpoints/last");
    let ck_version = root.join("ck_version");
    copy_dir(&last, &ck_version);
    set_version(&ck_version.join("manifest.json"), "format_version");
    expect3(&["eval", "--checkpoint", ck_version.to_str().unwrap(), "--split", "all", "--force"], "checkpoint version")?;

    let ck_corrupt = root.join("ck_corrupt");
    copy_dir(&last, &ck_corrupt);
    let blob = ck_corrupt.join("weights.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
    expect3(&["eval", "--checkpoint", ck_corrupt.to_str().unwrap(), "--split", "all", "--force"], "truncated checkpoint")?;

    fs::write(ck_corrupt.join("manifest.json"), "{ not json").unwrap();
    expect3(&["eval", "--checkpoint", ck_corrupt.to_str().unwrap(), "--split", "all", "--force"], "garbled manifest")?;

    Ok("dataset and checkpoint reload bit-exactly; version mismatch and corruption exit with 3".into())
}

#[test]
fn acceptance_criteria() {
    let dir9 = tempfile::tempdir().unwrap();
    let dir10 = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("conservation oracle", Box::new(conservation)),
        ("flux identities", Box::new(flux_identities)),
        ("gradient suite", Box::new(gradients)),
        ("zero propagation", Box::new(zero_propagation)),
        ("permutation equivariance and locality", Box::new(equivariance_and_locality)),
        ("metric oracles", Box::new(metric_oracles)),
        ("curriculum mechanics and resume", Box::new(curriculum)),
        ("overfit smoke test", Box::new(overfit_smoke)),
        ("ablation plumbing", Box::new(|| ablation_plumbing(dir9.path()))),
        ("format round-trips", Box::new(|| format_round_trips(dir10.path()))),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", k + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {detail}", k + 1);
                failed.push(k + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
