//! Experiment orchestration: configure a scenario, meta-train, meta-test,
//! run baselines on the same seeds, and write curves, a manifest and a
//! checkpoint.

mod checkpoint;
mod config;
mod curves;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{parse_baseline, parse_pairs, parse_seeds, OptimiserChoice, RunConfig, Scenario};
pub use curves::{
    blob_hash, emit_curves, input_hash, series, summarise, summary_table, to_csv, CurveRecord, Manifest, Phase,
    SeriesSummary, CSV_FILE, CSV_HEADER, MANIFEST_FILE, SUMMARY_STEPS,
};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::data::{self, synth_blobs, Dataset, DatasetName, GreyWeights};
use crate::error::{Error, Result};
use crate::exec;
use crate::learner::LearnerDims;
use crate::meta::{self, Curve, MetaConfig, MetaTrainReport, TaskSchedule};
use crate::mtl2l::{ContextMode, Mtl2lConfig, Mtl2lOptimizer};
use crate::neuro_opt::{LstmConfig, LstmOptimizer};
use crate::optimizer::{NeuralOptimizer, OptimizerKind};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
/// Blob task used by the tiny scenario.
pub const TINY_CLASSES: usize = 4;
pub const TINY_DIM: usize = 16;
pub const TINY_PER_CLASS: usize = 500;
pub const TINY_SPREAD: Scalar = 0.3;

/// The optimiser a scenario meta-trains.
pub fn build_optimiser(cfg: &RunConfig) -> Result<NeuralOptimizer> {
    let seed = cfg.meta.seed;
    match cfg.optimiser {
        OptimiserChoice::Neural(OptimizerKind::Lstm) => Ok(NeuralOptimizer::Lstm(LstmOptimizer::new(LstmConfig {
            init_seed: seed,
            ..LstmConfig::default()
        }))),
        OptimiserChoice::Neural(OptimizerKind::Mtl2l) => {
            let context = if cfg.scenario == Scenario::S2 {
                ContextMode::Momentum
            } else {
                ContextMode::Plain
            };
            Ok(NeuralOptimizer::Mtl2l(Mtl2lOptimizer::new(Mtl2lConfig {
                ctx_dim: cfg.learner.d_in,
                factor_seed: seed,
                init_seed: seed,
                context,
                ..Mtl2lConfig::default()
            })?))
        }
        OptimiserChoice::Baseline(_) => Err(Error::Config("baselines are not meta-trained".into())),
    }
}

/// Loads (or synthesises) one dataset for a run.
pub fn load_dataset(
    name: DatasetName,
    data_dir: &Path,
    subset: Option<usize>,
    grey: GreyWeights,
    seed: u64,
) -> Result<Dataset> {
    match name {
        DatasetName::Blobs => {
            let ds = synth_blobs(seed, TINY_CLASSES, TINY_DIM, TINY_PER_CLASS, TINY_SPREAD)?;
            Ok(subset.map_or(ds.clone(), |k| ds.subset(k)))
        }
        other => data::load_named(other, data_dir, subset, grey),
    }
}

/// Curves a run produced, and where they were written.
#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<CurveRecord>,
    pub summaries: Vec<SeriesSummary>,
    pub report: Option<MetaTrainReport>,
    pub meta_test: Vec<(u64, Curve)>,
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn data_files(names: &[DatasetName], dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = names.iter().flat_map(|&n| data::dataset_files(n, dir)).collect();
    files.sort();
    files.dedup();
    files
}

/// Fails with every missing path when a needed dataset is absent.
fn check_data(names: &[DatasetName], dir: &Path) -> Result<()> {
    let mut missing: Vec<PathBuf> = names.iter().flat_map(|&n| data::missing_files(n, dir)).collect();
    missing.sort();
    missing.dedup();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingData(missing))
    }
}

/// Baseline series for every requested kind and seed, in that order.
fn baseline_records(
    kinds: &[BaselineKind],
    lr: Scalar,
    dims: LearnerDims,
    ds: &Dataset,
    seeds: &[u64],
    steps: usize,
    batch: usize,
) -> Result<Vec<CurveRecord>> {
    let jobs: Vec<(BaselineKind, u64)> = kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let curves = exec::map_jobs(jobs.clone(), |(k, s)| {
        meta::baseline_curve(&BaselineConfig::new(k).with_lr(lr), dims, ds, s, steps, batch)
    });
    let mut out = Vec::new();
    for ((k, s), c) in jobs.into_iter().zip(curves) {
        out.extend(series(Phase::MetaTest, k.name(), s, &ds.name, &c?.losses));
    }
    Ok(out)
}

/// Meta-test curves of a frozen optimiser for each seed.
pub fn meta_test_seeds(
    opt: &NeuralOptimizer,
    dims: LearnerDims,
    ds: &Dataset,
    seeds: &[u64],
    meta: &MetaConfig,
) -> Result<Vec<(u64, Curve)>> {
    let curves = exec::map_jobs(seeds.to_vec(), |s| {
        meta::meta_test(opt, dims, ds, s, meta.meta_test_steps, meta.batch_size, &meta.preproc)
    });
    seeds.iter().zip(curves).map(|(&s, c)| Ok((s, c?))).collect()
}

/// Runs a configured scenario end to end.
pub fn run_scenario(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data_dir = data::resolve_data_dir(cfg.data_dir.as_deref());
    let mut needed: Vec<DatasetName> = Vec::new();
    if cfg.is_neural() {
        needed.extend(&cfg.train_datasets);
    }
    needed.push(cfg.test_dataset);
    check_data(&needed, &data_dir)?;

    let load = |n| load_dataset(n, &data_dir, cfg.subset, cfg.grey, cfg.meta.seed);
    let test_ds = load(cfg.test_dataset)?;
    let mut records = Vec::new();
    let mut report = None;
    let mut meta_test = Vec::new();
    let mut checkpoint_path = None;
    let mut checkpoint_hash = None;

    if cfg.is_neural() {
        let train: Vec<Dataset> = cfg.train_datasets.iter().map(|&n| load(n)).collect::<Result<_>>()?;
        let train_refs: Vec<&Dataset> = train.iter().collect();
        let schedule = if train.len() == 2 {
            TaskSchedule::alternating(cfg.meta.trials, 0, 1)
        } else {
            TaskSchedule::single(cfg.meta.trials)
        };
        let mut opt = build_optimiser(cfg)?;
        let r = meta::meta_train(&mut opt, cfg.learner, &cfg.meta, &schedule, &train_refs)?;
        let name = cfg.optimiser.name();
        for log in &r.logs {
            let base = log.trial * cfg.meta.steps_per_trial;
            records.extend(log.losses.iter().enumerate().map(|(t, &loss)| CurveRecord {
                phase: Phase::MetaTrain,
                optimiser: name.to_string(),
                seed: cfg.meta.seed,
                dataset: log.dataset.clone(),
                step: base + t + 1,
                loss,
            }));
        }
        let mut ck = Checkpoint::new(opt, cfg.meta, cfg.learner);
        ck.momentum = r.final_momentum.iter().map(|v| Tensor::row(v.clone())).collect();
        let path = cfg.out_dir.join(CHECKPOINT_FILE);
        ck.save(&path)?;
        checkpoint_hash = Some(blob_hash(&ck.to_bytes()?));
        checkpoint_path = Some(path);
        meta_test = meta_test_seeds(&ck.optimiser, cfg.learner, &test_ds, &cfg.seeds, &cfg.meta)?;
        for (s, c) in &meta_test {
            records.extend(series(Phase::MetaTest, name, *s, &test_ds.name, &c.losses));
        }
        report = Some(r);
    }

    let mut kinds = Vec::new();
    if let OptimiserChoice::Baseline(k) = cfg.optimiser {
        kinds.push(k);
    }
    for &k in &cfg.baselines {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    records.extend(baseline_records(
        &kinds,
        cfg.baseline_lr,
        cfg.learner,
        &test_ds,
        &cfg.seeds,
        cfg.meta.meta_test_steps,
        cfg.meta.batch_size,
    )?);

    let summaries = summarise(&records, Some(cfg.meta.meta_test_steps));
    let manifest = Manifest {
        config: to_value(cfg)?,
        input_hash: input_hash(cfg, &data_files(&needed, &data_dir))?,
        summary: summaries.clone(),
        checkpoint: checkpoint_hash,
        created_unix: now_unix(),
    };
    let (csv, manifest) = emit_curves(&records, &cfg.out_dir, &manifest)?;
    Ok(RunOutcome {
        records,
        summaries,
        report,
        meta_test,
        csv,
        manifest,
        checkpoint: checkpoint_path,
    })
}

fn to_value(v: &impl Serialize) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Persistence(e.to_string()))
}

/// Meta-test from a saved checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetaTestRequest {
    pub checkpoint: PathBuf,
    pub dataset: DatasetName,
    pub seeds: Vec<u64>,
    pub steps: Option<usize>,
    pub baselines: Vec<BaselineKind>,
    pub baseline_lr: Scalar,
    pub data_dir: Option<PathBuf>,
    pub subset: Option<usize>,
    pub grey: GreyWeights,
    pub out_dir: PathBuf,
}

pub fn run_meta_test(req: &MetaTestRequest) -> Result<RunOutcome> {
    if req.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let ck = Checkpoint::load(&req.checkpoint)?;
    let data_dir = data::resolve_data_dir(req.data_dir.as_deref());
    check_data(&[req.dataset], &data_dir)?;
    let ds = load_dataset(req.dataset, &data_dir, req.subset, req.grey, ck.meta.seed)?;
    if ds.d_in() != ck.learner.d_in {
        return Err(Error::Config(format!(
            "checkpoint learner takes {} features, {} has {}",
            ck.learner.d_in,
            ds.name,
            ds.d_in()
        )));
    }
    let mut meta = ck.meta;
    if let Some(s) = req.steps {
        meta.meta_test_steps = s;
    }
    let curves = meta_test_seeds(&ck.optimiser, ck.learner, &ds, &req.seeds, &meta)?;
    let name = ck.optimiser_name();
    let mut records = Vec::new();
    for (s, c) in &curves {
        records.extend(series(Phase::MetaTest, name, *s, &ds.name, &c.losses));
    }
    records.extend(baseline_records(
        &req.baselines,
        req.baseline_lr,
        ck.learner,
        &ds,
        &req.seeds,
        meta.meta_test_steps,
        meta.batch_size,
    )?);
    let summaries = summarise(&records, Some(meta.meta_test_steps));
    let mut inputs = data_files(&[req.dataset], &data_dir);
    inputs.push(req.checkpoint.clone());
    let manifest = Manifest {
        config: to_value(req)?,
        input_hash: input_hash(req, &inputs)?,
        summary: summaries.clone(),
        checkpoint: Some(blob_hash(&ck.to_bytes()?)),
        created_unix: now_unix(),
    };
    let (csv, manifest) = emit_curves(&records, &req.out_dir, &manifest)?;
    Ok(RunOutcome {
        records,
        summaries,
        report: None,
        meta_test: curves,
        csv,
        manifest,
        checkpoint: Some(req.checkpoint.clone()),
    })
}
