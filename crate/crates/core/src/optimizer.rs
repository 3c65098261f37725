//! Pieces shared by the learned optimisers: named parameter storage, the
//! recurrent state carried across steps, and the [`LearnedOptimizer`] trait.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mtl2l::Mtl2lOptimizer;
use crate::neuro_opt::LstmOptimizer;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lstm,
    Mtl2l,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Lstm => "lstm",
            OptimizerKind::Mtl2l => "mtl2l",
        }
    }
}

/// Ordered, named learned parameters `φ`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<Scalar> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[Scalar]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Contract(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every tensor as a gradient-requiring leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant.
    pub fn bind_frozen(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect(),
        }
    }

    /// Gradients of the bound leaves, flattened in storage order.
    pub fn grad_flat(&self, tape: &Tape, bound: &BoundParams) -> Result<Vec<Scalar>> {
        let mut out = Vec::with_capacity(self.numel());
        for v in &bound.vars {
            out.extend_from_slice(tape.grad(*v)?.data());
        }
        Ok(out)
    }
}

/// Parameter handles on a tape, in [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn at(&self, index: usize) -> Var {
        self.vars[index]
    }
}

/// Per-coordinate recurrent state of a stacked optimiser, plus the momentum
/// eigenvalue context when that variant is active.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
    pub momentum: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros(layers: usize, coords: usize, hidden: usize, momentum_slots: usize, ctx_dim: usize) -> Self {
        Self {
            h: vec![Tensor::zeros(coords, hidden); layers],
            c: vec![Tensor::zeros(coords, hidden); layers],
            momentum: vec![Tensor::zeros(1, ctx_dim); momentum_slots],
        }
    }

    pub fn coords(&self) -> usize {
        self.h.first().map_or(0, |t| t.rows())
    }

    /// Places the state on `tape` as constants (no history).
    pub fn attach(&self, tape: &Tape) -> StateVars {
        let put = |ts: &[Tensor]| ts.iter().map(|t| tape.constant(t.clone())).collect();
        StateVars {
            h: put(&self.h),
            c: put(&self.c),
            momentum: put(&self.momentum),
        }
    }

    /// Reads state values back off a tape.
    pub fn read(tape: &Tape, vars: &StateVars) -> Self {
        let get = |vs: &[Var]| vs.iter().map(|v| tape.value(*v)).collect();
        Self {
            h: get(&vars.h),
            c: get(&vars.c),
            momentum: get(&vars.momentum),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StateVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub momentum: Vec<Var>,
}

/// A coordinatewise recurrent optimiser `[g, h'] = V(features, h | φ)`.
pub trait LearnedOptimizer: Send + Sync {
    fn kind(&self) -> OptimizerKind;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Zero state for a learner with `coords` coordinates.
    fn init_state(&self, coords: usize) -> OptimizerState;

    /// One optimiser step. `features` is the `|θ|×2` preprocessed gradient;
    /// `context` is the learner's current input batch (ignored by optimisers
    /// that are not context aware). Returns the `|θ|×1` update and the new
    /// state.
    fn step(
        &self,
        tape: &Tape,
        phi: &BoundParams,
        state: &StateVars,
        features: Var,
        context: Var,
    ) -> Result<(Var, StateVars)>;
}

/// Either optimiser, for code paths that choose at runtime.
#[derive(Clone, Debug)]
pub enum NeuralOptimizer {
    Lstm(LstmOptimizer),
    Mtl2l(Mtl2lOptimizer),
}

impl LearnedOptimizer for NeuralOptimizer {
    fn kind(&self) -> OptimizerKind {
        match self {
            NeuralOptimizer::Lstm(o) => o.kind(),
            NeuralOptimizer::Mtl2l(o) => o.kind(),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            NeuralOptimizer::Lstm(o) => o.params(),
            NeuralOptimizer::Mtl2l(o) => o.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            NeuralOptimizer::Lstm(o) => o.params_mut(),
            NeuralOptimizer::Mtl2l(o) => o.params_mut(),
        }
    }

    fn init_state(&self, coords: usize) -> OptimizerState {
        match self {
            NeuralOptimizer::Lstm(o) => o.init_state(coords),
            NeuralOptimizer::Mtl2l(o) => o.init_state(coords),
        }
    }

    fn step(
        &self,
        tape: &Tape,
        phi: &BoundParams,
        state: &StateVars,
        features: Var,
        context: Var,
    ) -> Result<(Var, StateVars)> {
        match self {
            NeuralOptimizer::Lstm(o) => o.step(tape, phi, state, features, context),
            NeuralOptimizer::Mtl2l(o) => o.step(tape, phi, state, features, context),
        }
    }
}
