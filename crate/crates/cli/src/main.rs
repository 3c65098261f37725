use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mtl2l::data::{DatasetName, GreyWeights};
use mtl2l::harness::{
    self, parse_baseline, parse_pairs, parse_seeds, summary_table, Checkpoint, MetaTestRequest, OptimiserChoice,
    RunConfig, RunOutcome, Scenario,
};

#[derive(Parser)]
#[command(name = "mtl2l", version, about = "Meta-train and evaluate learned optimisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train an optimiser, meta-test it and run baselines.
    Run(RunArgs),
    /// Meta-test a saved checkpoint.
    MetaTest(MetaTestArgs),
    /// Print a checkpoint's contents.
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Data directory (default: $MTL2L_DATA_DIR, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Keep only the first N examples of each dataset.
    #[arg(long)]
    subset: Option<usize>,
    /// Use 0.30R + 0.11G + 0.59B for the CIFAR greyscale conversion.
    #[arg(long)]
    alt_grey: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated learner seeds; `a..b` ranges allowed.
    #[arg(long)]
    seeds: Option<String>,
    /// Meta-test steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Baselines to run alongside, comma-separated, or `none`.
    #[arg(long)]
    baselines: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// s1, s2, baseline-only or tiny.
    #[arg(long)]
    scenario: Option<String>,
    /// lstm, mtl2l, sgd, momentum or adam.
    #[arg(long)]
    optimiser: Option<String>,
    /// `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Meta-training seed.
    #[arg(long)]
    meta_seed: Option<u64>,
    /// Meta-training learner trials.
    #[arg(long)]
    trials: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct MetaTestArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// mnist, fashion-mnist, kmnist, cifar10-modified or blobs.
    #[arg(long)]
    dataset: String,
    #[command(flatten)]
    data: DataArgs,
}

fn baselines(s: &str) -> Result<Vec<mtl2l::baselines::BaselineKind>> {
    if s == "none" || s.is_empty() {
        return Ok(Vec::new());
    }
    Ok(s.split(',').map(|p| parse_baseline(p.trim())).collect::<Result<_, _>>()?)
}

fn grey(literal: bool) -> GreyWeights {
    if literal {
        GreyWeights::Alternate
    } else {
        GreyWeights::Standard
    }
}

fn build_run_config(args: &RunArgs) -> Result<RunConfig> {
    let file_pairs = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    let from_file = |key: &str| file_pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let scenario: Scenario = args
        .scenario
        .clone()
        .or_else(|| from_file("scenario"))
        .unwrap_or_else(|| "s1".into())
        .parse()?;
    let optimiser: OptimiserChoice = args
        .optimiser
        .clone()
        .or_else(|| from_file("optimiser").or_else(|| from_file("optimizer")))
        .unwrap_or_else(|| "lstm".into())
        .parse()?;
    let mut cfg = RunConfig::new(scenario, optimiser);
    for (k, v) in &file_pairs {
        if !matches!(k.as_str(), "scenario" | "optimiser" | "optimizer") {
            cfg.set(k, v)?;
        }
    }
    let d = &args.data;
    if let Some(p) = &d.data_dir {
        cfg.data_dir = Some(p.clone());
    }
    if let Some(k) = d.subset {
        cfg.subset = Some(k);
    }
    if d.alt_grey {
        cfg.grey = GreyWeights::Alternate;
    }
    if let Some(p) = &d.out_dir {
        cfg.out_dir = p.clone();
    }
    if let Some(s) = &d.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(n) = d.steps {
        cfg.meta.meta_test_steps = n;
    }
    if let Some(b) = &d.baselines {
        cfg.baselines = baselines(b)?;
    }
    if let Some(s) = args.meta_seed {
        cfg.meta.seed = s;
    }
    if let Some(q) = args.trials {
        cfg.meta.trials = q;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(outcome: &RunOutcome, started: Instant) {
    if let Some(r) = &outcome.report {
        println!(
            "meta-training: {} trials, {} learner steps, {} meta-updates",
            r.logs.len(),
            r.learner_steps,
            r.meta_updates
        );
        for log in r.logs.iter().filter(|l| l.aborted) {
            println!("  trial {} on {} aborted after {} steps", log.trial + 1, log.dataset, log.losses.len());
        }
    }
    print!("{}", summary_table(&outcome.summaries));
    println!("curves:     {}", outcome.csv.display());
    println!("manifest:   {}", outcome.manifest.display());
    if let Some(c) = &outcome.checkpoint {
        println!("checkpoint: {}", c.display());
    }
    println!("elapsed:    {:.1}s", started.elapsed().as_secs_f64());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let started = Instant::now();
    match cli.command {
        Command::Run(args) => {
            let cfg = build_run_config(&args)?;
            let outcome = harness::run_scenario(&cfg)?;
            report(&outcome, started);
        }
        Command::MetaTest(args) => {
            let d = &args.data;
            let dataset: DatasetName = args.dataset.parse()?;
            let req = MetaTestRequest {
                checkpoint: args.checkpoint.clone(),
                dataset,
                seeds: d.seeds.as_deref().map(parse_seeds).transpose()?.unwrap_or_else(|| vec![0, 1, 2, 3, 4]),
                steps: d.steps,
                baselines: d.baselines.as_deref().map(baselines).transpose()?.unwrap_or_default(),
                baseline_lr: 0.01,
                data_dir: d.data_dir.clone(),
                subset: d.subset,
                grey: grey(d.alt_grey),
                out_dir: d.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join("meta-test")),
            };
            let outcome = harness::run_meta_test(&req)?;
            report(&outcome, started);
        }
        Command::InspectCheckpoint { path } => {
            let ck = Checkpoint::load(&path)?;
            print!("{}", ck.describe());
        }
    }
    Ok(())
}
