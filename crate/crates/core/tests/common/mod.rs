//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

/// Fails the enclosing [`Check`] with a formatted message.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub mod oracles;
pub mod pipeline;

use mtl2l::autodiff::{Tape, Var};
use mtl2l::learner::LearnerDims;
use mtl2l::mtl2l::{Mtl2lConfig, Mtl2lOptimizer};
use mtl2l::neuro_opt::{LstmConfig, LstmOptimizer};
use mtl2l::optimizer::LearnedOptimizer;
use mtl2l::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one property check.
pub type Check = std::result::Result<(), String>;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Worst elementwise relative error between analytic gradients and central
/// differences of `f` around `inputs`.
pub fn fd_max_rel_err(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    analytic: &[Tensor],
) -> f64 {
    fd_worst(f, inputs, analytic).err
}

#[derive(Debug, Default)]
pub struct Worst {
    pub err: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn fd_worst(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], analytic: &[Tensor]) -> Worst {
    let mut worst = Worst::default();
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let num = (f(&plus) - f(&minus)) / (2.0 * FD_EPS);
            let err = rel_err(a.data()[i], num);
            if err > worst.err {
                worst = Worst { err, input: k, index: i, analytic: a.data()[i], numeric: num };
            }
        }
    }
    worst
}

/// Checks `root = Σ (op(inputs) ⊙ R)` for a fixed random `R`, returning the
/// worst relative error over every input element.
pub fn check_op(
    inputs: &[Tensor],
    seed: u64,
    op: &dyn Fn(&Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let probe = {
        let tape = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&tape, &vs).unwrap();
        let [r, c] = tape.shape(out);
        uniform(&mut rng(seed), r, c, -1.0, 1.0)
    };
    let eval = |xs: &[Tensor], leaves: bool| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let vs: Vec<Var> = xs
            .iter()
            .map(|t| if leaves { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = op(&tape, &vs).unwrap();
        let w = tape.constant(probe.clone());
        let root = tape.sum(tape.mul(out, w).unwrap()).unwrap();
        let value = tape.scalar(root).unwrap();
        if !leaves {
            return (value, Vec::new());
        }
        tape.backward(root).unwrap();
        (value, vs.iter().map(|v| tape.grad(*v).unwrap()).collect())
    };
    let (_, grads) = eval(inputs, true);
    fd_max_rel_err(&|xs| eval(xs, false).0, inputs, &grads)
}

/// ½ Σ a_i θ_i² on the tape with `θ` a column.
pub fn quadratic(tape: &Tape, theta: Var, a: &Tensor) -> Result<Var> {
    let av = tape.constant(a.clone());
    let sq = tape.mul(theta, theta)?;
    let w = tape.mul(sq, av)?;
    tape.scale(tape.sum(w)?, 0.5)
}

pub fn quadratic_grad(theta: &[f64], a: &Tensor) -> Vec<f64> {
    theta.iter().zip(a.data()).map(|(t, a)| a * t).collect()
}

/// LSTM optimiser with every parameter, head included, uniform in ±`scale`.
pub fn random_lstm(seed: u64, scale: f64) -> LstmOptimizer {
    let mut o = LstmOptimizer::new(LstmConfig::default());
    randomise(&mut o, seed, scale);
    o
}

/// MTL2L optimiser with every learned parameter uniform in ±`scale`.
pub fn random_mtl2l(cfg: Mtl2lConfig, seed: u64, scale: f64) -> Mtl2lOptimizer {
    let mut o = Mtl2lOptimizer::new(cfg).unwrap();
    randomise(&mut o, seed, scale);
    o
}

pub fn randomise<O: LearnedOptimizer>(o: &mut O, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let flat: Vec<f64> = (0..o.params().numel()).map(|_| r.random_range(-scale..scale)).collect();
    o.params_mut().assign_flat(&flat).unwrap();
}

pub fn tiny_dims() -> LearnerDims {
    LearnerDims::tiny()
}

/// `$MTL2L_DATA_DIR` if set, else the workspace `data/` folder.
pub fn data_dir() -> std::path::PathBuf {
    match std::env::var_os(mtl2l::data::DATA_DIR_ENV) {
        Some(p) if !p.is_empty() => p.into(),
        _ => std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}
