use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::data::{DatasetName, GreyWeights};
use crate::error::{Error, Result};
use crate::learner::LearnerDims;
use crate::meta::MetaConfig;
use crate::optimizer::OptimizerKind;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Meta-train and meta-test on the same domain.
    S1,
    /// Meta-train on two domains, meta-test on an unseen one.
    S2,
    /// Handcrafted optimisers only.
    BaselineOnly,
    /// Tiny learner on synthetic blobs.
    Tiny,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::BaselineOnly => "baseline-only",
            Scenario::Tiny => "tiny",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "s1" | "1" => Scenario::S1,
            "s2" | "2" => Scenario::S2,
            "baseline-only" | "baselines" => Scenario::BaselineOnly,
            "tiny" => Scenario::Tiny,
            other => return Err(Error::Config(format!("unknown scenario `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum OptimiserChoice {
    Neural(OptimizerKind),
    Baseline(BaselineKind),
}

impl OptimiserChoice {
    pub fn name(self) -> &'static str {
        match self {
            OptimiserChoice::Neural(k) => k.name(),
            OptimiserChoice::Baseline(k) => k.name(),
        }
    }
}

impl fmt::Display for OptimiserChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimiserChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lstm" => OptimiserChoice::Neural(OptimizerKind::Lstm),
            "mtl2l" => OptimiserChoice::Neural(OptimizerKind::Mtl2l),
            other => OptimiserChoice::Baseline(parse_baseline(other)?),
        })
    }
}

impl From<OptimiserChoice> for String {
    fn from(o: OptimiserChoice) -> Self {
        o.name().to_string()
    }
}

impl TryFrom<String> for OptimiserChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

pub fn parse_baseline(s: &str) -> Result<BaselineKind> {
    Ok(match s {
        "sgd" => BaselineKind::Sgd,
        "momentum" => BaselineKind::Momentum,
        "adam" => BaselineKind::Adam,
        other => return Err(Error::Config(format!("unknown optimiser `{other}`"))),
    })
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub optimiser: OptimiserChoice,
    pub train_datasets: Vec<DatasetName>,
    pub test_dataset: DatasetName,
    pub meta: MetaConfig,
    /// Learner seeds for meta-testing and baselines.
    pub seeds: Vec<u64>,
    /// Handcrafted optimisers run alongside on the meta-test task.
    pub baselines: Vec<BaselineKind>,
    pub baseline_lr: Scalar,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `subset` examples of each dataset.
    pub subset: Option<usize>,
    pub grey: GreyWeights,
    pub learner: LearnerDims,
}

impl RunConfig {
    /// Defaults for a scenario and optimiser.
    pub fn new(scenario: Scenario, optimiser: OptimiserChoice) -> Self {
        let all_baselines = vec![BaselineKind::Sgd, BaselineKind::Momentum, BaselineKind::Adam];
        let mut cfg = Self {
            scenario,
            optimiser,
            train_datasets: vec![DatasetName::Mnist],
            test_dataset: DatasetName::Mnist,
            meta: MetaConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            baselines: all_baselines,
            baseline_lr: 0.01,
            out_dir: PathBuf::from("runs").join(scenario.as_str()),
            data_dir: None,
            subset: None,
            grey: GreyWeights::Standard,
            learner: LearnerDims::default(),
        };
        match scenario {
            Scenario::S1 | Scenario::BaselineOnly => {}
            Scenario::S2 => {
                cfg.test_dataset = DatasetName::Cifar10Modified;
                if optimiser == OptimiserChoice::Neural(OptimizerKind::Mtl2l) {
                    cfg.train_datasets = vec![DatasetName::FashionMnist, DatasetName::Kmnist];
                    cfg.meta.trials = 30;
                    cfg.meta.perturbation = Some(0.01);
                } else {
                    cfg.train_datasets = vec![DatasetName::Kmnist];
                }
            }
            Scenario::Tiny => {
                cfg.train_datasets = vec![DatasetName::Blobs];
                cfg.test_dataset = DatasetName::Blobs;
                cfg.learner = LearnerDims::tiny();
                cfg.meta.trials = 5;
                cfg.meta.steps_per_trial = 40;
                cfg.meta.meta_test_steps = 100;
                cfg.baselines = Vec::new();
            }
        }
        cfg
    }

    pub fn is_neural(&self) -> bool {
        matches!(self.optimiser, OptimiserChoice::Neural(_))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.subset == Some(0) {
            return Err(Error::Config("subset must be positive".into()));
        }
        if !(self.baseline_lr > 0.0) {
            return Err(Error::Config("baseline learning rate must be positive".into()));
        }
        let mtl2l = self.optimiser == OptimiserChoice::Neural(OptimizerKind::Mtl2l);
        match self.scenario {
            Scenario::S1 => {
                if self.train_datasets.len() != 1 {
                    return Err(Error::Config(format!(
                        "s1 meta-trains on exactly one dataset, got {}",
                        self.train_datasets.len()
                    )));
                }
            }
            Scenario::S2 => {
                let want = if mtl2l { 2 } else { 1 };
                if self.train_datasets.len() != want {
                    return Err(Error::Config(format!(
                        "s2 with {} meta-trains on {want} dataset(s), got {}",
                        self.optimiser,
                        self.train_datasets.len()
                    )));
                }
                if self.train_datasets.contains(&self.test_dataset) {
                    return Err(Error::Config("s2 meta-tests on a dataset unseen during meta-training".into()));
                }
            }
            Scenario::BaselineOnly => {
                if self.is_neural() {
                    return Err(Error::Config("baseline-only runs take sgd, momentum or adam".into()));
                }
            }
            Scenario::Tiny => {
                if self.train_datasets != [DatasetName::Blobs] || self.test_dataset != DatasetName::Blobs {
                    return Err(Error::Config("tiny runs use synthetic blobs".into()));
                }
            }
        }
        if self.is_neural() {
            self.meta.validate()?;
        } else if self.meta.meta_test_steps == 0 || self.meta.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if self.scenario != Scenario::Tiny
            && (self.train_datasets.contains(&DatasetName::Blobs) || self.test_dataset == DatasetName::Blobs)
        {
            return Err(Error::Config("synthetic blobs are only used by the tiny scenario".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what} `{value}` for `{key}`"));
        let num = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
        let real = |what: &str| value.parse::<Scalar>().map_err(|_| bad(what));
        match key {
            "scenario" => self.scenario = value.parse()?,
            "optimiser" | "optimizer" => self.optimiser = value.parse()?,
            "train" | "train_datasets" => self.train_datasets = parse_list(value, |s| s.parse())?,
            "test" | "test_dataset" => self.test_dataset = value.parse()?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "baselines" => {
                self.baselines = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    parse_list(value, parse_baseline)?
                }
            }
            "baseline_lr" => self.baseline_lr = real("number")?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "subset" => self.subset = if value == "none" { None } else { Some(num("count")?) },
            "alt_grey" => {
                self.grey = if parse_bool(value).ok_or_else(|| bad("boolean"))? {
                    GreyWeights::Alternate
                } else {
                    GreyWeights::Standard
                }
            }
            "unroll" => self.meta.unroll = num("count")?,
            "trials" => self.meta.trials = num("count")?,
            "steps_per_trial" => self.meta.steps_per_trial = num("count")?,
            "steps" | "meta_test_steps" => self.meta.meta_test_steps = num("count")?,
            "meta_lr" => self.meta.meta_lr = real("number")?,
            "batch_size" => self.meta.batch_size = num("count")?,
            "perturbation" => self.meta.perturbation = if value == "none" { None } else { Some(real("number")?) },
            "meta_seed" => self.meta.seed = value.parse().map_err(|_| bad("seed"))?,
            "preproc_p" => self.meta.preproc.p = real("number")?,
            "hidden" => self.learner.hidden = num("count")?,
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Applies every setting of a `key = value` file. Blank lines and text
    /// after `#` are ignored. `scenario` and `optimiser`, when present, are
    /// applied first and reset the remaining fields to that scenario's
    /// defaults.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pairs = parse_pairs(&text)?;
        let scenario = pairs.iter().find(|(k, _)| k == "scenario").map(|(_, v)| v.parse()).transpose()?;
        let optimiser = pairs
            .iter()
            .find(|(k, _)| k == "optimiser" || k == "optimizer")
            .map(|(_, v)| v.parse())
            .transpose()?;
        if scenario.is_some() || optimiser.is_some() {
            *self = RunConfig::new(scenario.unwrap_or(self.scenario), optimiser.unwrap_or(self.optimiser));
        }
        for (k, v) in &pairs {
            self.set(k, v)?;
        }
        Ok(())
    }
}

/// Splits `key = value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(f).collect()
}

/// Comma-separated seeds; `a..b` expands to `a, …, b-1`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seed list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| bad())?;
            let b: u64 = b.parse().map_err(|_| bad())?;
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}
