//! The coordinatewise LSTM optimiser.
//!
//! Every learner coordinate is one row of a batch: its gradient is encoded
//! as two features, passed through a two-layer LSTM stack (hidden size 20 by
//! default), and read out by an affine head into a scalar update `g`. The
//! learner then moves by `θ ← θ + g`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optimizer::{BoundParams, LearnedOptimizer, OptimizerKind, OptimizerState, ParamStore, StateVars};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub p: Scalar,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self { p: 10.0 }
    }
}

/// Encodes each gradient coordinate as a (log-magnitude, sign) pair, or as
/// `(-1, e^p·∇)` when `|∇| < e^{-p}`. Output is `|∇|×2`.
pub fn preprocess_grad(grad: &[Scalar], cfg: &PreprocConfig) -> Result<Tensor> {
    if cfg.p <= 0.0 {
        return Err(Error::Config(format!("preprocessing exponent must be positive, got {}", cfg.p)));
    }
    let threshold = (-cfg.p).exp();
    let scale = cfg.p.exp();
    let mut out = Vec::with_capacity(grad.len() * 2);
    for &g in grad {
        if !g.is_finite() {
            return Err(Error::Numeric("gradient passed to preprocess_grad".into()));
        }
        if g.abs() >= threshold {
            out.push(g.abs().ln() / cfg.p);
            out.push(g.signum());
        } else {
            out.push(-1.0);
            out.push(scale * g);
        }
    }
    Tensor::new(grad.len(), 2, out)
}

/// One LSTM layer's weights with gates stacked in the order forget, input,
/// output, candidate: `w` is `4H×in`, `u` is `4H×H`, `b` is `1×4H`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(4 * hidden, input),
            u: Tensor::zeros(4 * hidden, hidden),
            b: Tensor::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }
}

/// LSTM cell on a batch of rows. `w`, `u`, `b` are tape handles for the
/// stacked gate weights; returns `(h, c)`.
pub fn lstm_cell(tape: &Tape, w: Var, u: Var, b: Var, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(c_prev)[1];
    if tape.shape(h_prev) != tape.shape(c_prev) || tape.shape(x)[0] != tape.shape(h_prev)[0] {
        return Err(Error::dim(
            "lstm_cell",
            format!("x {:?}, h {:?}, c {:?}", tape.shape(x), tape.shape(h_prev), tape.shape(c_prev)),
        ));
    }
    if tape.shape(u) != [4 * hidden, hidden] || tape.shape(w)[0] != 4 * hidden {
        return Err(Error::dim(
            "lstm_cell",
            format!("w {:?}, u {:?} for hidden {hidden}", tape.shape(w), tape.shape(u)),
        ));
    }
    let wu = tape.concat_cols(&[w, u])?;
    let xh = tape.concat_cols(&[x, h_prev])?;
    let pre = tape.linear(xh, wu, b)?;
    let hc = tape.lstm_gates(pre, c_prev)?;
    Ok((tape.slice_cols(hc, 0, hidden)?, tape.slice_cols(hc, hidden, hidden)?))
}

/// Evaluates an [`LstmLayerParams`] cell off-tape.
pub fn lstm_cell_values(params: &LstmLayerParams, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let [w, u, b, x, h, c] = [&params.w, &params.u, &params.b, x, h_prev, c_prev].map(|t| tape.constant(t.clone()));
    let (h, c) = lstm_cell(&tape, w, u, b, x, h, c)?;
    Ok((tape.value(h), tape.value(c)))
}

/// Affine readout from the top hidden state to a scalar update per
/// coordinate: `g = out_scale · (h·w_outᵀ + b_out)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    pub out_scale: Scalar,
}

impl Default for OutputHead {
    fn default() -> Self {
        Self { out_scale: 0.1 }
    }
}

impl OutputHead {
    pub fn apply(&self, tape: &Tape, h_top: Var, w_out: Var, b_out: Var) -> Result<Var> {
        let raw = tape.linear(h_top, w_out, b_out)?;
        tape.scale(raw, self.out_scale)
    }
}

/// `θ + g`.
pub fn apply_update(theta: &[Scalar], g: &[Scalar]) -> Result<Vec<Scalar>> {
    if theta.len() != g.len() {
        return Err(Error::Contract(format!("theta {} vs update {}", theta.len(), g.len())));
    }
    Ok(theta.iter().zip(g).map(|(t, u)| t + u).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub head: OutputHead,
    /// Seed for the uniform `±1/√hidden` initialisation of the LSTM weights.
    pub init_seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            hidden: 20,
            layers: 2,
            head: OutputHead::default(),
            init_seed: 0,
        }
    }
}

pub(crate) const FEATURES: usize = 2;

/// Uniform `±1/√hidden` initialisation, as in common LSTM implementations.
pub(crate) fn uniform_init(t: &mut Tensor, bound: Scalar, r: &mut rng::Rng) {
    for v in t.data_mut() {
        *v = r.random_range(-bound..=bound);
    }
}

/// Names of the head parameters, shared with the context-aware optimiser.
pub(crate) const HEAD_W: &str = "head.w";
pub(crate) const HEAD_B: &str = "head.b";

/// The coordinatewise LSTM optimiser: layer `ℓ` parameters are stored as
/// `l{ℓ}.w`, `l{ℓ}.u`, `l{ℓ}.b`, followed by the head.
#[derive(Clone, Debug)]
pub struct LstmOptimizer {
    pub config: LstmConfig,
    params: ParamStore,
}

impl LstmOptimizer {
    /// Random LSTM weights with a zero head, so the initial update is zero.
    pub fn new(config: LstmConfig) -> Self {
        let mut r = rng::rng(rng::derive(config.init_seed, rng::stream::OPTIMISER_INIT));
        let bound = 1.0 / (config.hidden as Scalar).sqrt();
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { FEATURES } else { config.hidden };
                let mut p = LstmLayerParams::zeros(input, config.hidden);
                uniform_init(&mut p.w, bound, &mut r);
                uniform_init(&mut p.u, bound, &mut r);
                uniform_init(&mut p.b, bound, &mut r);
                p
            })
            .collect();
        Self::from_layers(config, layers, Tensor::zeros(1, config.hidden), Tensor::zeros(1, 1))
    }

    pub fn from_layers(config: LstmConfig, layers: Vec<LstmLayerParams>, w_out: Tensor, b_out: Tensor) -> Self {
        let mut params = ParamStore::new();
        for (l, p) in layers.into_iter().enumerate() {
            params.push(format!("l{}.w", l + 1), p.w);
            params.push(format!("l{}.u", l + 1), p.u);
            params.push(format!("l{}.b", l + 1), p.b);
        }
        params.push(HEAD_W, w_out);
        params.push(HEAD_B, b_out);
        Self { config, params }
    }

    /// Every parameter zero.
    pub fn zeros(config: LstmConfig) -> Self {
        let layers = (0..config.layers)
            .map(|l| LstmLayerParams::zeros(if l == 0 { FEATURES } else { config.hidden }, config.hidden))
            .collect();
        Self::from_layers(config, layers, Tensor::zeros(1, config.hidden), Tensor::zeros(1, 1))
    }

    pub fn layer(&self, l: usize) -> LstmLayerParams {
        let get = |s: &str| self.params.get(&format!("l{}.{s}", l + 1)).expect("layer exists").clone();
        LstmLayerParams {
            w: get("w"),
            u: get("u"),
            b: get("b"),
        }
    }
}

impl LearnedOptimizer for LstmOptimizer {
    fn kind(&self) -> OptimizerKind {
        OptimizerKind::Lstm
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn init_state(&self, coords: usize) -> OptimizerState {
        OptimizerState::zeros(self.config.layers, coords, self.config.hidden, 0, 0)
    }

    fn step(
        &self,
        tape: &Tape,
        phi: &BoundParams,
        state: &StateVars,
        features: Var,
        _context: Var,
    ) -> Result<(Var, StateVars)> {
        let coords = tape.shape(features)[0];
        if state.h.len() != self.config.layers || tape.shape(state.h[0])[0] != coords {
            return Err(Error::Contract(format!(
                "optimiser state does not match {coords} feature rows"
            )));
        }
        let mut x = features;
        let mut next = StateVars {
            h: Vec::with_capacity(self.config.layers),
            c: Vec::with_capacity(self.config.layers),
            momentum: Vec::new(),
        };
        for l in 0..self.config.layers {
            let (w, u, b) = (phi.at(3 * l), phi.at(3 * l + 1), phi.at(3 * l + 2));
            let (h, c) = lstm_cell(tape, w, u, b, x, state.h[l], state.c[l])?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        let head = 3 * self.config.layers;
        let g = self.config.head.apply(tape, x, phi.at(head), phi.at(head + 1))?;
        Ok((g, next))
    }
}

/// Runs one optimiser step off-tape. Returns the update vector and new state.
pub fn optimiser_step<O: LearnedOptimizer + ?Sized>(
    opt: &O,
    state: &OptimizerState,
    features: &Tensor,
    context: &Tensor,
) -> Result<(Vec<Scalar>, OptimizerState)> {
    if state.coords() != features.rows() {
        return Err(Error::Contract(format!(
            "state has {} coordinates, features have {}",
            state.coords(),
            features.rows()
        )));
    }
    let tape = Tape::new();
    let phi = opt.params().bind_frozen(&tape);
    let sv = state.attach(&tape);
    let f = tape.constant(features.clone());
    let ctx = tape.constant(context.clone());
    let (g, next) = opt.step(&tape, &phi, &sv, f, ctx)?;
    Ok((tape.value(g).into_data(), OptimizerState::read(&tape, &next)))
}
