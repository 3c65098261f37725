//! Handcrafted optimisers over flat coordinates: SGD, heavy-ball momentum and
//! ADAM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Sgd,
    Momentum,
    Adam,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Sgd => "sgd",
            BaselineKind::Momentum => "momentum",
            BaselineKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub lr: Scalar,
    /// Momentum form: `v ← μ·v + g`, `θ ← θ − α·v`.
    pub momentum: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            lr: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(mut self, lr: Scalar) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid baseline settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineState {
    pub velocity: Vec<Scalar>,
    pub m: Vec<Scalar>,
    pub v: Vec<Scalar>,
    pub step: u64,
}

impl BaselineState {
    pub fn new(n: usize) -> Self {
        Self {
            velocity: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Applies one update to `theta` in place.
pub fn step(
    cfg: &BaselineConfig,
    state: &mut BaselineState,
    theta: &mut [Scalar],
    grad: &[Scalar],
) -> Result<()> {
    if theta.len() != grad.len() || state.m.len() != theta.len() {
        return Err(Error::Contract(format!(
            "theta {}, grad {}, state {}",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("baseline gradient".into()));
    }
    state.step += 1;
    match cfg.kind {
        BaselineKind::Sgd => {
            for (t, g) in theta.iter_mut().zip(grad) {
                *t -= cfg.lr * g;
            }
        }
        BaselineKind::Momentum => {
            for ((t, g), v) in theta.iter_mut().zip(grad).zip(state.velocity.iter_mut()) {
                *v = cfg.momentum * *v + g;
                *t -= cfg.lr * *v;
            }
        }
        BaselineKind::Adam => {
            let k = state.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(k);
            let c2 = 1.0 - cfg.beta2.powi(k);
            for (((t, g), m), v) in theta
                .iter_mut()
                .zip(grad)
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *t -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}
