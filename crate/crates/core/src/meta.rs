//! Meta-training by truncated unrolls, and meta-testing with frozen φ.
//!
//! A meta-training run is `trials` learner trials of `steps_per_trial` steps.
//! At step `t` of a trial the learner loss `L(θ_t)` is recorded on the
//! current unroll's tape, `∇θ` is computed separately and fed to the
//! optimiser as a constant, and `θ_{t+1} = θ_t + g`. When the window holds
//! `unroll` losses their sum is the meta-loss: it is backpropagated to φ, one
//! ADAM step is taken, and θ and the optimiser state are detached onto a fresh
//! tape before the update for this step is computed.

use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::baselines::{self, BaselineConfig, BaselineKind, BaselineState};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::learner::{self, InitScheme, LearnerDims, MlpLearner};
use crate::neuro_opt::{optimiser_step, preprocess_grad, PreprocConfig};
use crate::optimizer::{LearnedOptimizer, OptimizerState};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub unroll: usize,
    pub trials: usize,
    pub steps_per_trial: usize,
    pub meta_test_steps: usize,
    pub meta_lr: Scalar,
    pub batch_size: usize,
    /// Standard deviation of the noise added to θ at each unroll boundary;
    /// `None` disables it.
    pub perturbation: Option<Scalar>,
    pub preproc: PreprocConfig,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            unroll: 5,
            trials: 20,
            steps_per_trial: 100,
            meta_test_steps: 1000,
            meta_lr: 0.001,
            batch_size: 128,
            perturbation: None,
            preproc: PreprocConfig::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 || self.trials == 0 || self.steps_per_trial == 0 || self.batch_size == 0 {
            return Err(Error::Config("unroll, trials, steps and batch size must be positive".into()));
        }
        if !self.steps_per_trial.is_multiple_of(self.unroll) {
            return Err(Error::Config(format!(
                "steps per trial ({}) must be a multiple of the unroll ({})",
                self.steps_per_trial, self.unroll
            )));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::Config(format!("meta learning rate {} must be positive", self.meta_lr)));
        }
        if let Some(s) = self.perturbation {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("perturbation scale {s} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Which dataset each trial trains on, as indices into the dataset slice
/// passed to [`meta_train`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub datasets: Vec<usize>,
}

impl TaskSchedule {
    pub fn single(trials: usize) -> Self {
        Self {
            datasets: vec![0; trials],
        }
    }

    /// Trials numbered from 1: odd trials use `odd`, even trials `even`.
    pub fn alternating(trials: usize, odd: usize, even: usize) -> Self {
        Self {
            datasets: (1..=trials).map(|q| if q % 2 == 1 { odd } else { even }).collect(),
        }
    }

    pub fn dataset_for(&self, trial: usize) -> usize {
        self.datasets[trial]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub trial: usize,
    pub dataset: String,
    /// Learner loss at each step, before that step's update.
    pub losses: Vec<Scalar>,
    /// Summed window loss at each meta-update.
    pub meta_losses: Vec<Scalar>,
    /// Tape size when each window was backpropagated.
    pub window_nodes: Vec<usize>,
    pub aborted: bool,
    pub wall_clock_secs: f64,
}

impl TrialLog {
    pub fn mean_meta_loss(&self) -> Scalar {
        if self.meta_losses.is_empty() {
            return Scalar::NAN;
        }
        self.meta_losses.iter().sum::<Scalar>() / self.meta_losses.len() as Scalar
    }

    /// Equality of everything except timing.
    pub fn same_trajectory(&self, other: &TrialLog) -> bool {
        self.trial == other.trial
            && self.dataset == other.dataset
            && self.aborted == other.aborted
            && bits(&self.losses) == bits(&other.losses)
            && bits(&self.meta_losses) == bits(&other.meta_losses)
            && self.window_nodes == other.window_nodes
    }
}

fn bits(v: &[Scalar]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainReport {
    pub logs: Vec<TrialLog>,
    pub learner_steps: usize,
    pub meta_updates: usize,
    /// Momentum eigenvalue contexts at the end of the last trial.
    pub final_momentum: Vec<Vec<Scalar>>,
}

/// Seeds of trial `q` of a run seeded `seed`.
fn trial_seed(seed: u64, q: usize) -> u64 {
    rng::derive(seed, 0x1_0000 + q as u64)
}

/// Initial learner parameters for a seed.
pub fn initial_theta(dims: LearnerDims, seed: u64) -> Vec<Scalar> {
    MlpLearner::init(dims, rng::derive(seed, rng::stream::LEARNER_INIT), InitScheme::UniformFanIn).flatten()
}

/// Minibatch stream for a seed.
pub fn batch_sampler(ds: &Dataset, batch: usize, seed: u64) -> BatchSampler<'_> {
    BatchSampler::new(ds, batch, rng::derive(seed, rng::stream::BATCHES))
}

/// `θ + ε` with `ε ~ N(0, σ²)` i.i.d.
pub fn inject_perturbation(theta: &[Scalar], sigma: Scalar, seed: u64) -> Result<Vec<Scalar>> {
    if !(sigma >= 0.0) {
        return Err(Error::Contract(format!("perturbation scale {sigma} is negative")));
    }
    if sigma == 0.0 {
        return Ok(theta.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Contract(e.to_string()))?;
    let mut r = rng::rng(seed);
    Ok(theta.iter().map(|t| t + normal.sample(&mut r)).collect())
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Numeric(_))
}

/// Runs the meta-training loop, updating `opt` in place.
pub fn meta_train<O: LearnedOptimizer + ?Sized>(
    opt: &mut O,
    dims: LearnerDims,
    cfg: &MetaConfig,
    schedule: &TaskSchedule,
    datasets: &[&Dataset],
) -> Result<MetaTrainReport> {
    cfg.validate()?;
    if schedule.datasets.len() != cfg.trials {
        return Err(Error::Config(format!(
            "schedule has {} trials, configuration {}",
            schedule.datasets.len(),
            cfg.trials
        )));
    }
    if let Some(&bad) = schedule.datasets.iter().find(|&&i| i >= datasets.len()) {
        return Err(Error::Config(format!("schedule references dataset {bad} of {}", datasets.len())));
    }
    for ds in datasets {
        if ds.d_in() != dims.d_in || ds.n_cls > dims.n_cls {
            return Err(Error::Config(format!(
                "dataset {} ({} features, {} classes) does not fit the learner",
                ds.name,
                ds.d_in(),
                ds.n_cls
            )));
        }
    }
    let adam = BaselineConfig::new(BaselineKind::Adam).with_lr(cfg.meta_lr);
    let mut adam_state = BaselineState::new(opt.params().numel());
    let mut phi_flat = opt.params().flatten();
    let mut report = MetaTrainReport {
        logs: Vec::with_capacity(cfg.trials),
        learner_steps: 0,
        meta_updates: 0,
        final_momentum: Vec::new(),
    };
    for q in 0..cfg.trials {
        let ds = datasets[schedule.dataset_for(q)];
        let seed = trial_seed(cfg.seed, q);
        let started = Instant::now();
        let mut log = TrialLog {
            trial: q,
            dataset: ds.name.clone(),
            losses: Vec::with_capacity(cfg.steps_per_trial),
            meta_losses: Vec::with_capacity(cfg.steps_per_trial / cfg.unroll),
            window_nodes: Vec::new(),
            aborted: false,
            wall_clock_secs: 0.0,
        };
        let mut sampler = batch_sampler(ds, cfg.batch_size, seed);
        let perturb_seed = rng::derive(seed, rng::stream::PERTURB);

        let mut tape = Tape::new();
        let mut phi = opt.params().bind(&tape);
        let mut theta = tape.constant(Tensor::column(initial_theta(dims, seed)));
        let mut state = opt.init_state(dims.param_count()).attach(&tape);
        let mut window = Vec::with_capacity(cfg.unroll);

        for t in 0..cfg.steps_per_trial {
            let (x, y) = sampler.next_batch();
            let forward = (|| -> Result<(Scalar, Vec<Scalar>)> {
                let xv = tape.constant(x.clone());
                let l = learner::forward_loss(&tape, dims, theta, xv, &y)?;
                window.push(l);
                let theta_now = tape.value(theta);
                let (lv, grad) = learner::loss_and_grad(dims, theta_now.data(), &x, &y)?;
                Ok((lv, grad))
            })();
            let (loss, grad) = match forward {
                Ok(v) => v,
                Err(e) if is_numeric(&e) => {
                    log.aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            log.losses.push(loss);
            report.learner_steps += 1;

            if window.len() == cfg.unroll {
                let mut total = window[0];
                for &l in &window[1..] {
                    total = tape.add(total, l)?;
                }
                let meta_loss = tape.scalar(total)?;
                log.window_nodes.push(tape.len());
                tape.backward(total)?;
                let g_phi = opt.params().grad_flat(&tape, &phi)?;
                if g_phi.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("meta-gradient in trial {q}")));
                }
                baselines::step(&adam, &mut adam_state, &mut phi_flat, &g_phi)?;
                opt.params_mut().assign_flat(&phi_flat)?;
                log.meta_losses.push(meta_loss);
                report.meta_updates += 1;

                let mut theta_val = tape.value(theta).into_data();
                let carried = OptimizerState::read(&tape, &state);
                if let Some(sigma) = cfg.perturbation {
                    theta_val = inject_perturbation(&theta_val, sigma, rng::derive(perturb_seed, t as u64))?;
                }
                tape = Tape::new();
                phi = opt.params().bind(&tape);
                theta = tape.constant(Tensor::column(theta_val));
                state = carried.attach(&tape);
                window.clear();
            }

            if t + 1 == cfg.steps_per_trial {
                break;
            }
            let step = (|| -> Result<_> {
                let f = tape.constant(preprocess_grad(&grad, &cfg.preproc)?);
                let ctx = tape.constant(x);
                let (g, next) = opt.step(&tape, &phi, &state, f, ctx)?;
                Ok((tape.add(theta, g)?, next))
            })();
            match step {
                Ok((th, next)) => {
                    theta = th;
                    state = next;
                }
                Err(e) if is_numeric(&e) => {
                    log.aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        report.final_momentum = state.momentum.iter().map(|v| tape.value(*v).into_data()).collect();
        log.wall_clock_secs = started.elapsed().as_secs_f64();
        report.logs.push(log);
    }
    Ok(report)
}

/// A meta-test loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Loss at each step, before that step's update.
    pub losses: Vec<Scalar>,
    /// Set when a non-finite value cut the curve short.
    pub diverged: bool,
}

impl Curve {
    /// Mean loss over the 1-based inclusive step range, clipped to the curve.
    pub fn mean_over(&self, first: usize, last: usize) -> Scalar {
        let lo = first.saturating_sub(1).min(self.losses.len());
        let hi = last.min(self.losses.len());
        if hi <= lo {
            return Scalar::NAN;
        }
        self.losses[lo..hi].iter().sum::<Scalar>() / (hi - lo) as Scalar
    }
}

/// Trains a fresh learner for `steps` steps with frozen φ.
pub fn meta_test<O: LearnedOptimizer + ?Sized>(
    opt: &O,
    dims: LearnerDims,
    ds: &Dataset,
    learner_seed: u64,
    steps: usize,
    batch_size: usize,
    preproc: &PreprocConfig,
) -> Result<Curve> {
    let mut theta = initial_theta(dims, learner_seed);
    let mut sampler = batch_sampler(ds, batch_size, learner_seed);
    let mut state = opt.init_state(theta.len());
    let mut curve = Curve {
        losses: Vec::with_capacity(steps),
        diverged: false,
    };
    for _ in 0..steps {
        let (x, y) = sampler.next_batch();
        let step = (|| -> Result<Scalar> {
            let (loss, grad) = learner::loss_and_grad(dims, &theta, &x, &y)?;
            let feats = preprocess_grad(&grad, preproc)?;
            let (g, next) = optimiser_step(opt, &state, &feats, &x)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("optimiser update".into()));
            }
            for (t, d) in theta.iter_mut().zip(&g) {
                *t += d;
            }
            state = next;
            Ok(loss)
        })();
        match step {
            Ok(loss) => curve.losses.push(loss),
            Err(e) if is_numeric(&e) => {
                curve.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(curve)
}

/// Trains a fresh learner with a handcrafted optimiser on the same θ₀ and
/// batch stream that [`meta_test`] uses for `learner_seed`.
pub fn baseline_curve(
    cfg: &BaselineConfig,
    dims: LearnerDims,
    ds: &Dataset,
    learner_seed: u64,
    steps: usize,
    batch_size: usize,
) -> Result<Curve> {
    cfg.validate()?;
    let mut theta = initial_theta(dims, learner_seed);
    let mut sampler = batch_sampler(ds, batch_size, learner_seed);
    let mut state = BaselineState::new(theta.len());
    let mut curve = Curve {
        losses: Vec::with_capacity(steps),
        diverged: false,
    };
    for _ in 0..steps {
        let (x, y) = sampler.next_batch();
        let step = learner::loss_and_grad(dims, &theta, &x, &y)
            .and_then(|(loss, grad)| baselines::step(cfg, &mut state, &mut theta, &grad).map(|_| loss));
        match step {
            Ok(loss) => curve.losses.push(loss),
            Err(e) if is_numeric(&e) => {
                curve.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(curve)
}
