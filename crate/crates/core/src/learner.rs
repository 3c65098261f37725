//! One-hidden-layer MLP classifier: linear, ReLU, linear, softmax.
//!
//! Flat coordinate order: `w1` row-major (`hidden × d_in`), `b1`, `w2`
//! row-major (`n_cls × hidden`), `b2`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerDims {
    pub d_in: usize,
    pub hidden: usize,
    pub n_cls: usize,
}

impl Default for LearnerDims {
    fn default() -> Self {
        Self {
            d_in: 784,
            hidden: 32,
            n_cls: 10,
        }
    }
}

impl LearnerDims {
    /// 16 inputs, 8 hidden, 4 classes.
    pub fn tiny() -> Self {
        Self {
            d_in: 16,
            hidden: 8,
            n_cls: 4,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.d_in + self.hidden + self.n_cls * self.hidden + self.n_cls
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.d_in;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.n_cls * self.hidden;
        [w1, b1, w2, b2]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    #[default]
    UniformFanIn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLearner {
    pub dims: LearnerDims,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpLearner {
    pub fn zeros(dims: LearnerDims) -> Self {
        Self {
            dims,
            w1: Tensor::zeros(dims.hidden, dims.d_in),
            b1: Tensor::zeros(1, dims.hidden),
            w2: Tensor::zeros(dims.n_cls, dims.hidden),
            b2: Tensor::zeros(1, dims.n_cls),
        }
    }

    pub fn init(dims: LearnerDims, seed: u64, scheme: InitScheme) -> Self {
        let mut r = rng::rng(rng::derive(seed, rng::stream::LEARNER_INIT));
        let mut learner = Self::zeros(dims);
        match scheme {
            InitScheme::UniformFanIn => {
                for (w, fan_in) in [(&mut learner.w1, dims.d_in), (&mut learner.w2, dims.hidden)] {
                    let bound = 1.0 / (fan_in as Scalar).sqrt();
                    for v in w.data_mut() {
                        *v = r.random_range(-bound..=bound);
                    }
                }
            }
        }
        learner
    }

    pub fn flatten(&self) -> Vec<Scalar> {
        let mut out = Vec::with_capacity(self.dims.param_count());
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(dims: LearnerDims, theta: &[Scalar]) -> Result<Self> {
        if theta.len() != dims.param_count() {
            return Err(Error::Contract(format!(
                "expected {} coordinates, got {}",
                dims.param_count(),
                theta.len()
            )));
        }
        let [w1, b1, w2, b2] = dims.offsets();
        Ok(Self {
            dims,
            w1: Tensor::new(dims.hidden, dims.d_in, theta[w1..b1].to_vec())?,
            b1: Tensor::row(theta[b1..w2].to_vec()),
            w2: Tensor::new(dims.n_cls, dims.hidden, theta[w2..b2].to_vec())?,
            b2: Tensor::row(theta[b2..].to_vec()),
        })
    }

    /// Mean cross-entropy on a batch.
    pub fn forward_loss(&self, x: &Tensor, y: &[usize]) -> Result<Scalar> {
        loss(self.dims, &self.flatten(), x, y)
    }
}

/// Records the learner loss on `tape`, where `theta` is the `|θ|×1` column of
/// flat coordinates and `x` a `B×d_in` batch.
pub fn forward_loss(tape: &Tape, dims: LearnerDims, theta: Var, x: Var, y: &[usize]) -> Result<Var> {
    if tape.shape(theta) != [dims.param_count(), 1] {
        return Err(Error::Contract(format!(
            "theta shape {:?}, expected [{}, 1]",
            tape.shape(theta),
            dims.param_count()
        )));
    }
    if tape.shape(x)[1] != dims.d_in {
        return Err(Error::dim("forward_loss", format!("batch {:?}, d_in {}", tape.shape(x), dims.d_in)));
    }
    let [o_w1, o_b1, o_w2, o_b2] = dims.offsets();
    let part = |start: usize, len: usize, rows: usize, cols: usize| -> Result<Var> {
        let s = tape.slice_rows(theta, start, len)?;
        tape.reshape(s, rows, cols)
    };
    let w1 = part(o_w1, o_b1 - o_w1, dims.hidden, dims.d_in)?;
    let b1 = part(o_b1, dims.hidden, 1, dims.hidden)?;
    let w2 = part(o_w2, o_b2 - o_w2, dims.n_cls, dims.hidden)?;
    let b2 = part(o_b2, dims.n_cls, 1, dims.n_cls)?;
    let hidden = tape.relu(tape.linear(x, w1, b1)?)?;
    let logits = tape.linear(hidden, w2, b2)?;
    tape.softmax_cross_entropy(logits, y)
}

pub fn loss(dims: LearnerDims, theta: &[Scalar], x: &Tensor, y: &[usize]) -> Result<Scalar> {
    let tape = Tape::new();
    let t = tape.constant(Tensor::column(theta.to_vec()));
    let xv = tape.constant(x.clone());
    let l = forward_loss(&tape, dims, t, xv, y)?;
    tape.scalar(l)
}

/// Loss and `∇_θ` at `theta`.
pub fn loss_and_grad(
    dims: LearnerDims,
    theta: &[Scalar],
    x: &Tensor,
    y: &[usize],
) -> Result<(Scalar, Vec<Scalar>)> {
    let tape = Tape::new();
    let t = tape.leaf(Tensor::column(theta.to_vec()));
    let xv = tape.constant(x.clone());
    let l = forward_loss(&tape, dims, t, xv, y)?;
    tape.backward(l)?;
    Ok((tape.scalar(l)?, tape.grad(t)?.into_data()))
}
