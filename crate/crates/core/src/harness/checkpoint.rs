//! Binary checkpoints of a trained optimiser.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MTL2LCKP" | version u32 | meta_len u64 | meta JSON
//! | n_tensors u32 | { name_len u32 | name | rows u64 | cols u64 | rows·cols f64 }*
//! | sha256 of every preceding byte
//! ```
//!
//! Orthonormal factors are not stored; they are regenerated from the seed in
//! the metadata and checked against the stored digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::curves::hex;
use crate::error::{Error, Result};
use crate::learner::LearnerDims;
use crate::meta::MetaConfig;
use crate::mtl2l::{Mtl2lConfig, Mtl2lOptimizer};
use crate::neuro_opt::{LstmConfig, LstmOptimizer};
use crate::optimizer::{LearnedOptimizer, NeuralOptimizer, OptimizerKind};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"MTL2LCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: OptimizerKind,
    lstm: Option<LstmConfig>,
    mtl2l: Option<Mtl2lConfig>,
    factor_digest: Option<String>,
    meta: MetaConfig,
    learner: LearnerDims,
    /// Momentum eigenvalue contexts at the end of meta-training.
    momentum: Vec<Vec<Scalar>>,
}

/// A trained optimiser and the settings that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub optimiser: NeuralOptimizer,
    pub meta: MetaConfig,
    pub learner: LearnerDims,
    pub momentum: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(optimiser: NeuralOptimizer, meta: MetaConfig, learner: LearnerDims) -> Self {
        Self {
            optimiser,
            meta,
            learner,
            momentum: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (lstm, mtl2l, factor_digest) = match &self.optimiser {
            NeuralOptimizer::Lstm(o) => (Some(o.config), None, None),
            NeuralOptimizer::Mtl2l(o) => (None, Some(o.config), Some(hex(&o.factors().digest()))),
        };
        let meta = Meta {
            kind: self.optimiser.kind(),
            lstm,
            mtl2l,
            factor_digest,
            meta: self.meta,
            learner: self.learner,
            momentum: self.momentum.iter().map(|t| t.data().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Persistence(e.to_string()))?;
        let params = self.optimiser.params();
        let mut out = Vec::with_capacity(64 + json.len() + 8 * params.numel() + 32 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Persistence("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Persistence("checksum mismatch (truncated or corrupt file)".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Persistence(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Persistence(format!("metadata: {e}")))?;
        let mut optimiser = match (meta.kind, meta.lstm, meta.mtl2l) {
            (OptimizerKind::Lstm, Some(c), None) => NeuralOptimizer::Lstm(LstmOptimizer::zeros(c)),
            (OptimizerKind::Mtl2l, None, Some(c)) => NeuralOptimizer::Mtl2l(Mtl2lOptimizer::zeros(c)?),
            _ => return Err(Error::Persistence("metadata does not match the optimiser kind".into())),
        };
        if let NeuralOptimizer::Mtl2l(o) = &optimiser {
            let regenerated = hex(&o.factors().digest());
            if meta.factor_digest.as_deref() != Some(regenerated.as_str()) {
                return Err(Error::Persistence("regenerated factors do not match the stored digest".into()));
            }
        }
        let n = r.u32()? as usize;
        if n != optimiser.params().len() {
            return Err(Error::Persistence(format!(
                "{n} tensors stored, optimiser has {}",
                optimiser.params().len()
            )));
        }
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Persistence("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Persistence(format!("{name}: implausible shape")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Persistence("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let slot = optimiser
                .params_mut()
                .get_mut(&name)
                .ok_or_else(|| Error::Persistence(format!("unknown tensor `{name}`")))?;
            if slot.shape() != [rows, cols] {
                return Err(Error::Persistence(format!(
                    "{name}: stored {rows}×{cols}, expected {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(rows, cols, data)?;
        }
        if r.pos != body.len() {
            return Err(Error::Persistence("trailing bytes after the last tensor".into()));
        }
        let momentum = meta.momentum.into_iter().map(Tensor::row).collect();
        Ok(Self {
            optimiser,
            meta: meta.meta,
            learner: meta.learner,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn optimiser_name(&self) -> &'static str {
        self.optimiser.kind().name()
    }

    /// Human-readable description.
    pub fn describe(&self) -> String {
        let p = self.optimiser.params();
        let mut s = format!(
            "kind: {}\nformat version: {FORMAT_VERSION}\nlearned parameters: {} in {} tensors\n",
            self.optimiser.kind().name(),
            p.numel(),
            p.len()
        );
        if let NeuralOptimizer::Mtl2l(o) = &self.optimiser {
            s += &format!(
                "factor seed: {}\nfactor digest: {}\nsharing: {:?}\ncontext: {:?}\n",
                o.config.factor_seed,
                hex(&o.factors().digest()),
                o.config.sharing,
                o.config.context
            );
        }
        s += &format!(
            "learner: {}-{}-{}\nmeta: unroll {}, trials {}, steps {}, lr {}, batch {}, seed {}\n",
            self.learner.d_in,
            self.learner.hidden,
            self.learner.n_cls,
            self.meta.unroll,
            self.meta.trials,
            self.meta.steps_per_trial,
            self.meta.meta_lr,
            self.meta.batch_size,
            self.meta.seed
        );
        for (name, t) in p.iter() {
            s += &format!("  {name:<24} {}×{}\n", t.rows(), t.cols());
        }
        s
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Persistence(format!("unexpected end of checkpoint at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
