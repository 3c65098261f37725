//! Meta-training bookkeeping, run determinism and persistence.

use super::*;
use mtl2l::data::synth_blobs;
use mtl2l::harness::{self, Checkpoint, OptimiserChoice, RunConfig, Scenario};
use mtl2l::learner::LearnerDims;
use mtl2l::meta::{meta_test, meta_train, MetaConfig, MetaTrainReport, TaskSchedule};
use mtl2l::mtl2l::{ContextMode, Mtl2lConfig, Mtl2lOptimizer};
use mtl2l::neuro_opt::{optimiser_step, preprocess_grad, LstmConfig, LstmOptimizer, PreprocConfig};
use mtl2l::optimizer::{NeuralOptimizer, OptimizerKind};

fn tiny_blobs(seed: u64) -> mtl2l::data::Dataset {
    synth_blobs(seed, 4, 16, 500, harness::TINY_SPREAD).unwrap()
}

fn tiny_mtl2l(seed: u64, context: ContextMode) -> Mtl2lOptimizer {
    Mtl2lOptimizer::new(Mtl2lConfig {
        ctx_dim: 16,
        factor_seed: seed,
        init_seed: seed,
        context,
        ..Mtl2lConfig::default()
    })
    .unwrap()
}

/// Checks step and meta-update counts and that every logged meta-loss is the
/// sum of its window's learner losses.
pub fn check_accounting(report: &MetaTrainReport, cfg: &MetaConfig) -> Check {
    let steps = cfg.trials * cfg.steps_per_trial;
    let updates = cfg.trials * (cfg.steps_per_trial / cfg.unroll);
    ensure!(report.learner_steps == steps, "{} learner steps, want {steps}", report.learner_steps);
    ensure!(report.meta_updates == updates, "{} meta-updates, want {updates}", report.meta_updates);
    ensure!(report.logs.len() == cfg.trials, "{} trial logs", report.logs.len());
    for log in &report.logs {
        ensure!(!log.aborted, "trial {} aborted", log.trial);
        for (k, m) in log.meta_losses.iter().enumerate() {
            let window: f64 = log.losses[k * cfg.unroll..(k + 1) * cfg.unroll].iter().sum();
            ensure!((m - window).abs() <= 1e-10, "trial {} window {k}: {m} vs Σ {window}", log.trial);
        }
    }
    Ok(())
}

fn accounting_config() -> MetaConfig {
    MetaConfig { unroll: 5, trials: 20, steps_per_trial: 100, batch_size: 32, seed: 3, ..MetaConfig::default() }
}

pub fn lstm_accounting() -> Check {
    let ds = tiny_blobs(1);
    let cfg = accounting_config();
    let mut opt = LstmOptimizer::new(LstmConfig::default());
    let report = meta_train(&mut opt, LearnerDims::tiny(), &cfg, &TaskSchedule::single(cfg.trials), &[&ds])
        .map_err(|e| e.to_string())?;
    check_accounting(&report, &cfg)
}

pub fn mtl2l_accounting_with_perturbation() -> Check {
    let (a, b) = (tiny_blobs(1), tiny_blobs(2));
    let cfg = MetaConfig { perturbation: Some(0.01), ..accounting_config() };
    let mut opt = tiny_mtl2l(4, ContextMode::Momentum);
    let report = meta_train(&mut opt, LearnerDims::tiny(), &cfg, &TaskSchedule::alternating(cfg.trials, 0, 1), &[&a, &b])
        .map_err(|e| e.to_string())?;
    check_accounting(&report, &cfg)?;
    ensure!(report.final_momentum.len() == 4, "{} momentum slots", report.final_momentum.len());
    Ok(())
}

pub fn truncation_bounds_window_graphs() -> Check {
    let ds = tiny_blobs(5);
    let dims = LearnerDims::tiny();
    let mut sizes = Vec::new();
    for steps in [20, 60] {
        let cfg = MetaConfig { trials: 2, steps_per_trial: steps, batch_size: 16, ..MetaConfig::default() };
        let mut opt = LstmOptimizer::new(LstmConfig::default());
        let r = meta_train(&mut opt, dims, &cfg, &TaskSchedule::single(2), &[&ds]).map_err(|e| e.to_string())?;
        for log in &r.logs {
            let rest = &log.window_nodes[1..];
            ensure!(rest.iter().all(|&n| n == rest[0]), "window graphs grow: {:?}", log.window_nodes);
            ensure!(log.window_nodes[0] <= rest[0], "first window larger than steady state");
        }
        sizes.push(*r.logs[0].window_nodes.iter().max().unwrap());
    }
    ensure!(sizes[0] == sizes[1], "graph size depends on trial length: {sizes:?}");
    Ok(())
}

pub fn trials_are_isolated_and_deterministic() -> Check {
    let ds = tiny_blobs(6);
    let dims = LearnerDims::tiny();
    let cfg = MetaConfig { trials: 3, steps_per_trial: 20, batch_size: 16, seed: 9, ..MetaConfig::default() };
    let run = || {
        let mut opt = tiny_mtl2l(7, ContextMode::Plain);
        let r = meta_train(&mut opt, dims, &cfg, &TaskSchedule::single(3), &[&ds]).unwrap();
        (r, opt.params().flatten())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    for (x, y) in a.logs.iter().zip(&b.logs) {
        ensure!(x.same_trajectory(y), "trial {} differs between identical runs", x.trial);
    }
    ensure!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()), "trained φ differs");
    let firsts: Vec<f64> = a.logs.iter().map(|l| l.losses[0]).collect();
    ensure!(firsts[0] != firsts[1] && firsts[1] != firsts[2], "θ₀ repeated across trials: {firsts:?}");
    Ok(())
}

fn tiny_config(dir: &std::path::Path, seeds: Vec<u64>) -> RunConfig {
    let mut cfg = RunConfig::new(Scenario::Tiny, OptimiserChoice::Neural(OptimizerKind::Mtl2l));
    cfg.seeds = seeds;
    cfg.meta.trials = 2;
    cfg.meta.meta_test_steps = 30;
    cfg.baselines = vec![mtl2l::baselines::BaselineKind::Sgd];
    cfg.out_dir = dir.to_path_buf();
    cfg
}

pub fn identical_configs_give_identical_csv() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), vec![0, 1]);
    let snapshot = |o: &harness::RunOutcome| {
        let mut manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&o.manifest).unwrap()).unwrap();
        manifest.as_object_mut().unwrap().remove("created_unix");
        let ck = std::fs::read(o.checkpoint.as_ref().unwrap()).unwrap();
        (std::fs::read(&o.csv).unwrap(), ck, manifest)
    };
    let a = snapshot(&harness::run_scenario(&cfg).map_err(|e| e.to_string())?);
    let b = snapshot(&harness::run_scenario(&cfg).map_err(|e| e.to_string())?);
    ensure!(!a.0.is_empty() && a.0 == b.0, "CSV bytes differ between identical runs");
    ensure!(a.1 == b.1, "checkpoint bytes differ between identical runs");
    ensure!(a.2 == b.2, "manifests differ beyond the timestamp");
    Ok(())
}

pub fn checkpoint_round_trip_reproduces_curves() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), vec![3, 4]);
    let out = harness::run_scenario(&cfg).map_err(|e| e.to_string())?;
    let path = out.checkpoint.clone().ok_or("no checkpoint written")?;
    let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).unwrap();
    ensure!(ck.to_bytes().unwrap() == bytes, "save → load → save changed the bytes");
    let ds = harness::load_dataset(mtl2l::data::DatasetName::Blobs, dir.path(), None, Default::default(), cfg.meta.seed)
        .map_err(|e| e.to_string())?;
    for (seed, curve) in &out.meta_test {
        let again = meta_test(&ck.optimiser, ck.learner, &ds, *seed, cfg.meta.meta_test_steps, cfg.meta.batch_size, &cfg.meta.preproc)
            .map_err(|e| e.to_string())?;
        let bits = |c: &mtl2l::meta::Curve| c.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&again) == bits(curve), "seed {seed}: reloaded curve differs");
    }
    ensure!(matches!(ck.optimiser, NeuralOptimizer::Mtl2l(_)), "checkpoint kind");
    Ok(())
}

/// A full-size learner has more coordinates than one row chunk, so the
/// parallel path really splits work.
pub fn parallel_matches_sequential() -> Check {
    let dims = LearnerDims::default();
    let mut r = rng(90);
    let x = uniform(&mut r, 8, dims.d_in, 0.0, 1.0);
    let y: Vec<usize> = (0..8).collect();
    let theta = mtl2l::meta::initial_theta(dims, 91);
    let step = || {
        let (_, g) = mtl2l::learner::loss_and_grad(dims, &theta, &x, &y).unwrap();
        let f = preprocess_grad(&g, &PreprocConfig::default()).unwrap();
        let opt = random_lstm(92, 0.3);
        let (u, s) = optimiser_step(&opt, &opt.init_state(theta.len()), &f, &x).unwrap();
        let mut bits: Vec<u64> = g.iter().chain(&u).map(|v| v.to_bits()).collect();
        bits.extend(s.h[1].data().iter().map(|v| v.to_bits()));
        bits
    };
    let before = mtl2l::exec::parallel_enabled();
    mtl2l::exec::set_parallel(false);
    let seq = step();
    mtl2l::exec::set_parallel(true);
    let par = step();
    mtl2l::exec::set_parallel(before);
    ensure!(theta.len() > mtl2l::exec::CHUNK_ROWS, "learner too small to split");
    ensure!(seq == par, "parallel and sequential results differ");
    Ok(())
}

pub const ALL: &[(&str, fn() -> Check)] = &[
    ("lstm_accounting", lstm_accounting),
    ("mtl2l_accounting_with_perturbation", mtl2l_accounting_with_perturbation),
    ("truncation_bounds_window_graphs", truncation_bounds_window_graphs),
    ("trials_are_isolated_and_deterministic", trials_are_isolated_and_deterministic),
    ("identical_configs_give_identical_csv", identical_configs_give_identical_csv),
    ("checkpoint_round_trip_reproduces_curves", checkpoint_round_trip_reproduces_curves),
    ("parallel_matches_sequential", parallel_matches_sequential),
];
