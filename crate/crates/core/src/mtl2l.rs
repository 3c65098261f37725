//! The context-aware optimiser.
//!
//! Its cell is an LSTM whose synapses are rebuilt at every step as
//! `W_t = Q·diag(γ_t)·Pᵀ` and `U_t = S·diag(ω_t)·Jᵀ`. The orthonormal factors
//! `Q, P, S, J` are drawn once from a seed and never trained. The eigenvalue
//! vectors `γ_t, ω_t` come from small MLP hypernetworks that read the
//! learner's current input batch, so the update rule changes with the data
//! the learner is seeing.
//!
//! In the momentum variant each hypernetwork output is smoothed across steps
//! as `N_t = 0.9·N_{t-1} + 0.1·MLP(x_t)` with `N_0 = 0`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::neuro_opt::{lstm_cell, uniform_init, OutputHead, FEATURES, HEAD_B, HEAD_W};
use crate::optimizer::{BoundParams, LearnedOptimizer, OptimizerKind, OptimizerState, ParamStore, StateVars};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const GATES: [&str; 4] = ["f", "i", "o", "a"];

/// Random orthonormal rows: the first `m` rows of an `n×n` orthogonal matrix
/// obtained from the QR decomposition of a standard Gaussian matrix, with the
/// signs fixed so `R` has a positive diagonal. Returns `m×n`.
pub fn gen_orthonormal(seed: u64, n: usize, m: usize) -> Result<Tensor> {
    if m > n {
        return Err(Error::Contract(format!("cannot take {m} orthonormal rows of dimension {n}")));
    }
    let mut r = rng::rng(seed);
    let mut a = Tensor::zeros(n, n);
    for v in a.data_mut() {
        *v = StandardNormal.sample(&mut r);
    }
    let q = householder_q(&a);
    // rows of Qᵀ are orthonormal
    let qt = q.transpose();
    Tensor::new(m, n, qt.data()[..m * n].to_vec())
}

/// Orthogonal factor of `a = QR` with `diag(R) > 0`.
fn householder_q(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut r = a.clone();
    let mut q = Tensor::identity(n);
    let mut v = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r.get(i, k).powi(2)).sum::<Scalar>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = r.get(k, k);
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for i in k..n {
            v[i] = r.get(i, k);
        }
        v[k] -= alpha;
        let vnorm = (k..n).map(|i| v[i] * v[i]).sum::<Scalar>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for vi in &mut v[k..n] {
            *vi /= vnorm;
        }
        for j in 0..n {
            let dot: Scalar = (k..n).map(|i| v[i] * r.get(i, j)).sum();
            for i in k..n {
                let val = r.get(i, j) - 2.0 * v[i] * dot;
                r.set(i, j, val);
            }
        }
        for i in 0..n {
            let dot: Scalar = (k..n).map(|j| q.get(i, j) * v[j]).sum();
            for j in k..n {
                let val = q.get(i, j) - 2.0 * dot * v[j];
                q.set(i, j, val);
            }
        }
    }
    for j in 0..n {
        if r.get(j, j) < 0.0 {
            for i in 0..n {
                let val = -q.get(i, j);
                q.set(i, j, val);
            }
        }
    }
    q
}

/// Fixed factors of one gate's two synapses.
#[derive(Clone, Debug, PartialEq)]
pub struct GateFactors {
    /// `H×H`, left factor of `W`.
    pub q: Tensor,
    /// `in×H` with orthonormal rows, right factor of `W`.
    pub p: Tensor,
    /// `H×H`, left factor of `U`.
    pub s: Tensor,
    /// `H×H`, right factor of `U`.
    pub j: Tensor,
}

/// All fixed factors, indexed `[layer][gate]`. Regenerated bit-exactly from
/// `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoFactorSet {
    pub seed: u64,
    pub layers: Vec<[GateFactors; 4]>,
}

impl OrthoFactorSet {
    pub fn generate(seed: u64, input_dims: &[usize], hidden: usize) -> Result<Self> {
        let base = rng::derive(seed, rng::stream::FACTORS);
        let mut layers = Vec::with_capacity(input_dims.len());
        for (l, &d_in) in input_dims.iter().enumerate() {
            let mut gates = Vec::with_capacity(4);
            for g in 0..4 {
                let s = |k: u64| rng::derive(base, ((l as u64) << 16) | ((g as u64) << 8) | k);
                gates.push(GateFactors {
                    q: gen_orthonormal(s(0), hidden, hidden)?,
                    p: gen_orthonormal(s(1), hidden, d_in)?,
                    s: gen_orthonormal(s(2), hidden, hidden)?,
                    j: gen_orthonormal(s(3), hidden, hidden)?,
                });
            }
            let gates: [GateFactors; 4] = gates.try_into().expect("four gates");
            layers.push(gates);
        }
        Ok(Self { seed, layers })
    }

    /// SHA-256 over every factor's bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for g in layer {
                for t in [&g.q, &g.p, &g.s, &g.j] {
                    for v in t.data() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        h.finalize().into()
    }
}

/// `Q·diag(γ)·Pᵀ` on the tape. `q` is `n×r`, `gamma` is `1×r`, `p` is `m×r`.
pub fn compose_synapse_on(tape: &Tape, q: Var, gamma: Var, p: Var) -> Result<Var> {
    let qg = tape.mul(q, gamma)?;
    tape.matmul_nt(qg, p)
}

/// `Q·diag(γ)·Pᵀ`, returning `n×m`.
pub fn compose_synapse(q: &Tensor, gamma: &[Scalar], p: &Tensor) -> Result<Tensor> {
    if q.cols() != gamma.len() || p.cols() != gamma.len() {
        return Err(Error::dim(
            "compose_synapse",
            format!("Q {:?}, γ {}, P {:?}", q.shape(), gamma.len(), p.shape()),
        ));
    }
    let tape = Tape::new();
    let qv = tape.constant(q.clone());
    let gv = tape.constant(Tensor::row(gamma.to_vec()));
    let pv = tape.constant(p.clone());
    let out = compose_synapse_on(&tape, qv, gv, pv)?;
    Ok(tape.value(out))
}

/// An MLP `d_ctx → hidden → ReLU → out`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for one hypernetwork.
#[derive(Clone, Copy, Debug)]
pub struct HyperVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HyperNet {
    pub fn zeros(d_ctx: usize, hidden: usize, out: usize) -> Self {
        Self {
            w1: Tensor::zeros(hidden, d_ctx),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(out, hidden),
            b2: Tensor::zeros(1, out),
        }
    }

    pub fn d_ctx(&self) -> usize {
        self.w1.cols()
    }

    pub fn numel(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Batch-mean hypernetwork output, optionally folded into a momentum
    /// context (which is updated in place).
    pub fn eigen_context(&self, x: &Tensor, momentum: Option<&mut MomentumContext>) -> Result<Tensor> {
        let tape = Tape::new();
        let hv = HyperVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        };
        let xv = tape.constant(x.clone());
        match momentum {
            None => Ok(tape.value(eigen_context(&tape, &hv, xv, None)?)),
            Some(m) => {
                let prev = tape.constant(m.n_prev.clone());
                let n = eigen_context(&tape, &hv, xv, Some((prev, m.decay, m.mix)))?;
                m.n_prev = tape.value(n);
                Ok(m.n_prev.clone())
            }
        }
    }
}

/// Running eigenvalue context for the momentum variant.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumContext {
    pub n_prev: Tensor,
    pub decay: Scalar,
    pub mix: Scalar,
}

impl MomentumContext {
    pub fn new(dim: usize) -> Self {
        Self {
            n_prev: Tensor::zeros(1, dim),
            decay: 0.9,
            mix: 0.1,
        }
    }
}

/// `1×out` eigenvalues from a `B×d_ctx` context batch: the mean over the batch
/// of the hypernetwork output, optionally mixed into `(N_prev, decay, mix)`.
pub fn eigen_context(tape: &Tape, hyper: &HyperVars, x: Var, momentum: Option<(Var, Scalar, Scalar)>) -> Result<Var> {
    if tape.shape(x)[1] != tape.shape(hyper.w1)[1] {
        return Err(Error::Contract(format!(
            "context has {} features, hypernetwork expects {}",
            tape.shape(x)[1],
            tape.shape(hyper.w1)[1]
        )));
    }
    let hidden = tape.relu(tape.linear(x, hyper.w1, hyper.b1)?)?;
    let out = tape.linear(hidden, hyper.w2, hyper.b2)?;
    let m = tape.mean_rows(out)?;
    match momentum {
        None => Ok(m),
        Some((prev, decay, mix)) => {
            let a = tape.scale(prev, decay)?;
            let b = tape.scale(m, mix)?;
            tape.add(a, b)
        }
    }
}

/// MTL2L cell: builds the four gates' synapses from `factors` and per-gate
/// eigenvalue rows, then runs the LSTM update. `bias` is `1×4H`.
#[allow(clippy::too_many_arguments)]
pub fn mtl2l_cell(
    tape: &Tape,
    factors: &[GateFactors; 4],
    eigs_w: [Var; 4],
    eigs_u: [Var; 4],
    bias: Var,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let mut ws = Vec::with_capacity(4);
    let mut us = Vec::with_capacity(4);
    for (g, f) in factors.iter().enumerate() {
        let q = tape.constant(f.q.clone());
        let p = tape.constant(f.p.clone());
        let s = tape.constant(f.s.clone());
        let j = tape.constant(f.j.clone());
        ws.push(compose_synapse_on(tape, q, eigs_w[g], p)?);
        us.push(compose_synapse_on(tape, s, eigs_u[g], j)?);
    }
    let w = tape.concat_rows(&ws)?;
    let u = tape.concat_rows(&us)?;
    lstm_cell(tape, w, u, bias, x, h_prev, c_prev)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenSharing {
    /// One hypernetwork per (layer, side), shared by the four gates.
    #[default]
    Shared,
    /// One hypernetwork per (layer, side, gate).
    PerGate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// Eigenvalues are the batch-mean hypernetwork output.
    #[default]
    Plain,
    /// Eigenvalues follow `N_t = 0.9·N_{t-1} + 0.1·MLP(x_t)`.
    Momentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mtl2lConfig {
    pub hidden: usize,
    pub layers: usize,
    pub ctx_dim: usize,
    pub hyper_hidden: usize,
    pub head: OutputHead,
    pub sharing: EigenSharing,
    pub context: ContextMode,
    pub factor_seed: u64,
    pub init_seed: u64,
    /// Initial value of the hypernetworks' output bias, so synapses start with
    /// singular values near this value.
    pub eig_bias_init: Scalar,
}

impl Default for Mtl2lConfig {
    fn default() -> Self {
        Self {
            hidden: 20,
            layers: 2,
            ctx_dim: 784,
            hyper_hidden: 32,
            head: OutputHead::default(),
            sharing: EigenSharing::Shared,
            context: ContextMode::Plain,
            factor_seed: 0,
            init_seed: 0,
            eig_bias_init: 1.0,
        }
    }
}

impl Mtl2lConfig {
    fn hypers_per_side(&self) -> usize {
        match self.sharing {
            EigenSharing::Shared => 1,
            EigenSharing::PerGate => 4,
        }
    }

    fn input_dims(&self) -> Vec<usize> {
        (0..self.layers).map(|l| if l == 0 { FEATURES } else { self.hidden }).collect()
    }

    /// Momentum slots: one per hypernetwork, ordered layer, side (W then U),
    /// gate.
    pub fn momentum_slots(&self) -> usize {
        match self.context {
            ContextMode::Plain => 0,
            ContextMode::Momentum => self.layers * 2 * self.hypers_per_side(),
        }
    }
}

/// Parameter index of the first of a hypernetwork's four tensors.
#[derive(Clone, Debug)]
struct LayerLayout {
    hyper_w: Vec<usize>,
    hyper_u: Vec<usize>,
    bias: usize,
}

/// The context-aware optimiser. Trainable parameters are the hypernetworks,
/// the gate biases and the head; the factor set is constant.
#[derive(Clone, Debug)]
pub struct Mtl2lOptimizer {
    pub config: Mtl2lConfig,
    factors: OrthoFactorSet,
    params: ParamStore,
    layout: Vec<LayerLayout>,
    head: usize,
}

impl Mtl2lOptimizer {
    pub fn new(config: Mtl2lConfig) -> Result<Self> {
        let mut me = Self::zeros(config)?;
        let mut r = rng::rng(rng::derive(config.init_seed, rng::stream::OPTIMISER_INIT));
        let ctx_bound = 1.0 / (config.ctx_dim as Scalar).sqrt();
        let hid_bound = 1.0 / (config.hyper_hidden as Scalar).sqrt();
        let gate_bound = 1.0 / (config.hidden as Scalar).sqrt();
        let names: Vec<String> = me.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = me.params.get_mut(&name).expect("own name");
            if name.ends_with(".w1") || name.ends_with(".b1") {
                uniform_init(t, ctx_bound, &mut r);
            } else if name.ends_with(".w2") {
                uniform_init(t, hid_bound, &mut r);
            } else if name.ends_with(".b2") {
                t.data_mut().fill(config.eig_bias_init);
            } else if name.ends_with(".bias") {
                uniform_init(t, gate_bound, &mut r);
            }
        }
        Ok(me)
    }

    /// Zero hypernetworks, biases and head.
    pub fn zeros(config: Mtl2lConfig) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::Config("optimiser needs at least one layer".into()));
        }
        let factors = OrthoFactorSet::generate(config.factor_seed, &config.input_dims(), config.hidden)?;
        let mut params = ParamStore::new();
        let mut layout = Vec::with_capacity(config.layers);
        let per_side = config.hypers_per_side();
        for l in 0..config.layers {
            let mut sides = [Vec::new(), Vec::new()];
            for (s, side) in ["hyper_w", "hyper_u"].iter().enumerate() {
                for k in 0..per_side {
                    let prefix = match config.sharing {
                        EigenSharing::Shared => format!("l{}.{side}", l + 1),
                        EigenSharing::PerGate => format!("l{}.{side}.{}", l + 1, GATES[k]),
                    };
                    sides[s].push(params.len());
                    let h = HyperNet::zeros(config.ctx_dim, config.hyper_hidden, config.hidden);
                    params.push(format!("{prefix}.w1"), h.w1);
                    params.push(format!("{prefix}.b1"), h.b1);
                    params.push(format!("{prefix}.w2"), h.w2);
                    params.push(format!("{prefix}.b2"), h.b2);
                }
            }
            let bias = params.len();
            params.push(format!("l{}.bias", l + 1), Tensor::zeros(1, 4 * config.hidden));
            let [hyper_w, hyper_u] = sides;
            layout.push(LayerLayout { hyper_w, hyper_u, bias });
        }
        let head = params.len();
        params.push(HEAD_W, Tensor::zeros(1, config.hidden));
        params.push(HEAD_B, Tensor::zeros(1, 1));
        Ok(Self {
            config,
            factors,
            params,
            layout,
            head,
        })
    }

    pub fn factors(&self) -> &OrthoFactorSet {
        &self.factors
    }

    /// Copies a hypernetwork out of the parameter store.
    pub fn hypernet(&self, layer: usize, side_u: bool, index: usize) -> HyperNet {
        let ly = &self.layout[layer];
        let start = if side_u { ly.hyper_u[index] } else { ly.hyper_w[index] };
        let all: Vec<&Tensor> = self.params.iter().map(|(_, t)| t).collect();
        HyperNet {
            w1: all[start].clone(),
            b1: all[start + 1].clone(),
            w2: all[start + 2].clone(),
            b2: all[start + 3].clone(),
        }
    }

    /// Overwrites a hypernetwork in the parameter store.
    pub fn set_hypernet(&mut self, layer: usize, side_u: bool, index: usize, net: HyperNet) -> Result<()> {
        let ly = &self.layout[layer];
        let start = if side_u { ly.hyper_u[index] } else { ly.hyper_w[index] };
        let names: Vec<String> = self.params.iter().skip(start).take(4).map(|(n, _)| n.to_string()).collect();
        for (name, t) in names.iter().zip([net.w1, net.b1, net.w2, net.b2]) {
            let slot = self.params.get_mut(name).expect("layout name");
            if slot.shape() != t.shape() {
                return Err(Error::dim("set_hypernet", format!("{name}: {:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(())
    }

    fn hyper_vars(phi: &BoundParams, start: usize) -> HyperVars {
        HyperVars {
            w1: phi.at(start),
            b1: phi.at(start + 1),
            w2: phi.at(start + 2),
            b2: phi.at(start + 3),
        }
    }
}

impl LearnedOptimizer for Mtl2lOptimizer {
    fn kind(&self) -> OptimizerKind {
        OptimizerKind::Mtl2l
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn init_state(&self, coords: usize) -> OptimizerState {
        OptimizerState::zeros(
            self.config.layers,
            coords,
            self.config.hidden,
            self.config.momentum_slots(),
            self.config.hidden,
        )
    }

    fn step(
        &self,
        tape: &Tape,
        phi: &BoundParams,
        state: &StateVars,
        features: Var,
        context: Var,
    ) -> Result<(Var, StateVars)> {
        let coords = tape.shape(features)[0];
        if state.h.len() != self.config.layers || tape.shape(state.h[0])[0] != coords {
            return Err(Error::Contract(format!(
                "optimiser state does not match {coords} feature rows"
            )));
        }
        if state.momentum.len() != self.config.momentum_slots() {
            return Err(Error::Contract("momentum context slots do not match the configuration".into()));
        }
        if tape.shape(context)[1] != self.config.ctx_dim {
            return Err(Error::Contract(format!(
                "context batch has {} features, expected {}",
                tape.shape(context)[1],
                self.config.ctx_dim
            )));
        }
        let momentum = self.config.context == ContextMode::Momentum;
        let mut next = StateVars {
            h: Vec::with_capacity(self.config.layers),
            c: Vec::with_capacity(self.config.layers),
            momentum: Vec::with_capacity(state.momentum.len()),
        };
        let mut slot = 0;
        let mut eigs = |starts: &[usize], next: &mut StateVars| -> Result<[Var; 4]> {
            let mut out = Vec::with_capacity(starts.len());
            for &start in starts {
                let hv = Self::hyper_vars(phi, start);
                let e = if momentum {
                    let prev = state.momentum[slot];
                    slot += 1;
                    let n = eigen_context(tape, &hv, context, Some((prev, 0.9, 0.1)))?;
                    next.momentum.push(n);
                    n
                } else {
                    eigen_context(tape, &hv, context, None)?
                };
                out.push(e);
            }
            Ok(if out.len() == 1 {
                [out[0]; 4]
            } else {
                [out[0], out[1], out[2], out[3]]
            })
        };
        let mut x = features;
        for (l, ly) in self.layout.iter().enumerate() {
            let ew = eigs(&ly.hyper_w, &mut next)?;
            let eu = eigs(&ly.hyper_u, &mut next)?;
            let (h, c) = mtl2l_cell(
                tape,
                &self.factors.layers[l],
                ew,
                eu,
                phi.at(ly.bias),
                x,
                state.h[l],
                state.c[l],
            )?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        let g = self.config.head.apply(tape, x, phi.at(self.head), phi.at(self.head + 1))?;
        Ok((g, next))
    }
}
