//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] in construction order and
//! [`Tape::backward`] replays them in reverse. A node is recorded with its
//! backward rule only when at least one input requires a gradient; otherwise
//! it is stored as a constant.
//!
//! Broadcasting is limited to a `1×n` row (bias) or a `1×1` scalar on the
//! right-hand operand of [`Tape::add`] and [`Tape::mul`].
//!
//! ```
//! use mtl2l::autodiff::Tape;
//! use mtl2l::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, Scalar),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { src: Var, axis: Axis, start: usize },
    Reshape(Var),
    /// `acts` holds `f, i, o, a, tanh(c)` per unit, `N×5H`.
    LstmGates { pre: Var, c_prev: Var, acts: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// A tape belongs to a single thread (it is not `Sync`); independent tapes
/// can live on different workers.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric(op.to_string()))
    }
}

#[inline]
fn sigmoid(x: Scalar) -> Scalar {
    1.0 / (1.0 + (-x).exp())
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that will receive a gradient.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, severing its history.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> Result<Scalar> {
        self.with_value(v, |t| {
            if t.is_scalar() {
                Ok(t.data()[0])
            } else {
                Err(Error::Contract(format!("expected a scalar, got {:?}", t.shape())))
            }
        })
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        if rg {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    // ---- forward operations ----------------------------------------------

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.cols() != tb.rows() {
                return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, ta.data(), tb.data(), &mut c);
            finite("matmul", Tensor::new(m, n, c)?)?
        };
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a (m×k) · bᵀ` with `b` shaped `n×k`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.cols() != tb.cols() {
                return Err(Error::dim("matmul_nt", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, ta.data(), tb.data(), &mut c);
            finite("matmul_nt", Tensor::new(m, n, c)?)?
        };
        Ok(self.record(out, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Affine map `x · wᵀ + b` with `w` shaped `out×in` and `b` a `1×out` row.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw, tb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            if tx.cols() != tw.cols() || tb.shape() != [1, tw.rows()] {
                return Err(Error::dim(
                    "linear",
                    format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
                ));
            }
            let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, tx.data(), tw.data(), &mut c);
            let bias = tb.data();
            exec::for_each_row_chunk(&mut c, n, |_, chunk| {
                for row in chunk.chunks_mut(n) {
                    for (v, bi) in row.iter_mut().zip(bias) {
                        *v += bi;
                    }
                }
            });
            finite("linear", Tensor::new(m, n, c)?)?
        };
        Ok(self.record(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
        if a.shape() == b.shape() {
            Ok(Bcast::Same)
        } else if b.is_scalar() {
            Ok(Bcast::Scalar)
        } else if b.rows() == 1 && b.cols() == a.cols() {
            Ok(Bcast::Row)
        } else {
            Err(Error::dim(op, format!("{:?} with {:?}", a.shape(), b.shape())))
        }
    }

    fn zip_bcast(
        a: &Tensor,
        b: &Tensor,
        mode: Bcast,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Tensor {
        let cols = a.cols();
        let data = match mode {
            Bcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let s = b.data()[0];
                a.data().iter().map(|&x| f(x, s)).collect()
            }
            Bcast::Row => a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % cols]))
                .collect(),
        };
        Tensor::new(a.rows(), cols, data).expect("shape preserved")
    }

    /// Elementwise sum; `b` may be a bias row or a scalar.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let mode = Self::bcast("add", ta, tb)?;
            (finite("add", Self::zip_bcast(ta, tb, mode, |x, y| x + y))?, mode)
        };
        Ok(self.record(out, Op::Add(a, b, mode), &[a, b]))
    }

    /// Elementwise (Hadamard) product; `b` may be a row or a scalar.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let mode = Self::bcast("mul", ta, tb)?;
            (finite("mul", Self::zip_bcast(ta, tb, mode, |x, y| x * y))?, mode)
        };
        Ok(self.record(out, Op::Mul(a, b, mode), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, a: Var, factor: Scalar) -> Result<Var> {
        let out = finite("scale", self.with_value(a, |t| t.map(|v| v * factor)))?;
        Ok(self.record(out, Op::Scale(a, factor), &[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(sigmoid));
        Ok(self.record(finite("sigmoid", out)?, Op::Sigmoid(a), &[a]))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(Scalar::tanh));
        Ok(self.record(finite("tanh", out)?, Op::Tanh(a), &[a]))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(|v| v.max(0.0)));
        Ok(self.record(finite("relu", out)?, Op::Relu(a), &[a]))
    }

    /// Mean softmax cross-entropy of `B×C` logits against `B` class labels.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            let (b, c) = (z.rows(), z.cols());
            if labels.len() != b || b == 0 {
                return Err(Error::dim(
                    "softmax_cross_entropy",
                    format!("{b} rows of logits, {} labels", labels.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
            }
            let mut probs = vec![0.0; b * c];
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = z.row_slice(r);
                let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
                let denom: Scalar = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + denom.ln();
                total += lse - row[y];
                for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *p = (v - max).exp() / denom;
                }
            }
            let loss = finite("softmax_cross_entropy", Tensor::scalar(total / b as Scalar))?;
            (loss, Tensor::new(b, c, probs)?)
        };
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.record(loss, op, &[logits]))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| Tensor::scalar(t.data().iter().sum()));
        Ok(self.record(finite("sum", out)?, Op::Sum(a), &[a]))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| {
            Tensor::scalar(t.data().iter().sum::<Scalar>() / t.len().max(1) as Scalar)
        });
        Ok(self.record(finite("mean", out)?, Op::Mean(a), &[a]))
    }

    /// Column-wise mean over rows: `B×n` to `1×n`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| {
            let mut s = col_sums(t);
            let inv = 1.0 / t.rows().max(1) as Scalar;
            s.data_mut().iter_mut().for_each(|v| *v *= inv);
            s
        });
        Ok(self.record(finite("mean_rows", out)?, Op::MeanRows(a), &[a]))
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, Axis::Rows)
    }

    /// Places tensors with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, Axis::Cols)
    }

    fn concat(&self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            match axis {
                Axis::Rows => {
                    let cols = ts[0].cols();
                    if ts.iter().any(|t| t.cols() != cols) {
                        return Err(Error::dim("concat_rows", "column counts differ"));
                    }
                    let rows = ts.iter().map(|t| t.rows()).sum();
                    let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
                    Tensor::new(rows, cols, data)?
                }
                Axis::Cols => {
                    let rows = ts[0].rows();
                    if ts.iter().any(|t| t.rows() != rows) {
                        return Err(Error::dim("concat_cols", "row counts differ"));
                    }
                    let cols: usize = ts.iter().map(|t| t.cols()).sum();
                    let mut data = vec![0.0; rows * cols];
                    exec::for_each_row_chunk(&mut data, cols, |r0, chunk| {
                        for (i, row) in chunk.chunks_mut(cols).enumerate() {
                            let mut off = 0;
                            for t in &ts {
                                let w = t.cols();
                                row[off..off + w].copy_from_slice(t.row_slice(r0 + i));
                                off += w;
                            }
                        }
                    });
                    Tensor::new(rows, cols, data)?
                }
            }
        };
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.record(out, op, parts))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with_value(a, |t| {
            if start + len > t.rows() {
                return Err(Error::dim("slice_rows", format!("{start}+{len} > {}", t.rows())));
            }
            let c = t.cols();
            Tensor::new(len, c, t.data()[start * c..(start + len) * c].to_vec())
        })?;
        let op = Op::Slice {
            src: a,
            axis: Axis::Rows,
            start,
        };
        Ok(self.record(out, op, &[a]))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with_value(a, |t| {
            if start + len > t.cols() {
                return Err(Error::dim("slice_cols", format!("{start}+{len} > {}", t.cols())));
            }
            let mut data = vec![0.0; t.rows() * len];
            exec::for_each_row_chunk(&mut data, len, |r0, chunk| {
                for (i, row) in chunk.chunks_mut(len).enumerate() {
                    row.copy_from_slice(&t.row_slice(r0 + i)[start..start + len]);
                }
            });
            Tensor::new(t.rows(), len, data)
        })?;
        let op = Op::Slice {
            src: a,
            axis: Axis::Cols,
            start,
        };
        Ok(self.record(out, op, &[a]))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.with_value(a, |t| t.clone().reshaped(rows, cols))?;
        Ok(self.record(out, Op::Reshape(a), &[a]))
    }

    /// Pointwise part of an LSTM cell.
    ///
    /// `pre` holds the `N×4H` gate pre-activations in the column order
    /// forget, input, output, candidate; `c_prev` is `N×H`. Returns `N×2H`
    /// with the new hidden state in the first `H` columns and the new cell in
    /// the last `H`.
    pub fn lstm_gates(&self, pre: Var, c_prev: Var) -> Result<Var> {
        let (out, acts) = {
            let nodes = self.nodes.borrow();
            let (tp, tc) = (&nodes[pre.0].value, &nodes[c_prev.0].value);
            let h = tc.cols();
            if tp.rows() != tc.rows() || tp.cols() != 4 * h {
                return Err(Error::dim(
                    "lstm_gates",
                    format!("pre {:?}, c_prev {:?}", tp.shape(), tc.shape()),
                ));
            }
            let mut acts = vec![0.0; tc.rows() * 5 * h];
            exec::for_each_row_chunk(&mut acts, 5 * h, |r0, chunk| {
                for (i, row) in chunk.chunks_mut(5 * h).enumerate() {
                    let p = tp.row_slice(r0 + i);
                    let cp = tc.row_slice(r0 + i);
                    for j in 0..h {
                        let f = sigmoid(p[j]);
                        let ig = sigmoid(p[h + j]);
                        let a = p[3 * h + j].tanh();
                        row[j] = f;
                        row[h + j] = ig;
                        row[2 * h + j] = sigmoid(p[2 * h + j]);
                        row[3 * h + j] = a;
                        row[4 * h + j] = (f * cp[j] + ig * a).tanh();
                    }
                }
            });
            let acts = Tensor::new(tc.rows(), 5 * h, acts)?;
            let mut data = vec![0.0; tc.rows() * 2 * h];
            exec::for_each_row_chunk(&mut data, 2 * h, |r0, chunk| {
                for (i, row) in chunk.chunks_mut(2 * h).enumerate() {
                    let q = acts.row_slice(r0 + i);
                    let cp = tc.row_slice(r0 + i);
                    let (hs, cs) = row.split_at_mut(h);
                    for j in 0..h {
                        cs[j] = q[j] * cp[j] + q[h + j] * q[3 * h + j];
                        hs[j] = q[2 * h + j] * q[4 * h + j];
                    }
                }
            });
            (finite("lstm_gates", Tensor::new(tc.rows(), 2 * h, data)?)?, acts)
        };
        Ok(self.record(out, Op::LstmGates { pre, c_prev, acts }, &[pre, c_prev]))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates `d root / d leaf` into every gradient-requiring leaf.
    ///
    /// Fails if `root` is not a scalar or if gradients from an earlier call
    /// have not been cleared with [`Tape::zero_grad`].
    pub fn backward(&self, root: Var) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if !nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            Self::propagate(&nodes, node, &g, &mut grads)?;
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Gradient accumulated into a leaf by the last backward pass; zero if the
    /// leaf was not reachable from the root.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self.grads.borrow();
        let grads = grads
            .as_ref()
            .ok_or_else(|| Error::Contract("grad requested before backward".into()))?;
        let nodes = self.nodes.borrow();
        if !matches!(nodes[v.0].op, Op::Leaf) {
            return Err(Error::Contract("gradients are only retained for leaves".into()));
        }
        Ok(match &grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            }
        })
    }

    fn propagate(
        nodes: &[Node],
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), tb.data(), &mut da);
                    acc(*a, Tensor::new(m, k, da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, ta.data(), g.data(), &mut db);
                    acc(*b, Tensor::new(k, n, db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(m, n, k, g.data(), tb.data(), &mut da);
                    acc(*a, Tensor::new(m, k, da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(n, m, k, g.data(), ta.data(), &mut db);
                    acc(*b, Tensor::new(n, k, db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
                if wants(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm_nn(m, n, k, g.data(), tw.data(), &mut dx);
                    acc(*x, Tensor::new(m, k, dx)?);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; n * k];
                    gemm_tn(n, m, k, g.data(), tx.data(), &mut dw);
                    acc(*w, Tensor::new(n, k, dw)?);
                }
                if wants(*b) {
                    acc(*b, col_sums(g));
                }
            }
            Op::Add(a, b, mode) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    let db = match mode {
                        Bcast::Same => g.clone(),
                        Bcast::Row => col_sums(g),
                        Bcast::Scalar => Tensor::scalar(g.data().iter().sum()),
                    };
                    acc(*b, db);
                }
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, Self::zip_bcast(g, tb, *mode, |x, y| x * y));
                }
                if wants(*b) {
                    let prod = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                    )?;
                    let db = match mode {
                        Bcast::Same => prod,
                        Bcast::Row => col_sums(&prod),
                        Bcast::Scalar => Tensor::scalar(prod.data().iter().sum()),
                    };
                    acc(*b, db);
                }
            }
            Op::Scale(a, factor) => acc(*a, g.map(|v| v * factor)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gi, s)| gi * s * (1.0 - s));
                acc(*a, Tensor::new(g.rows(), g.cols(), d.collect())?);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gi, t)| gi * (1.0 - t * t));
                acc(*a, Tensor::new(g.rows(), g.cols(), d.collect())?);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 });
                acc(*a, Tensor::new(g.rows(), g.cols(), d.collect())?);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let scale = g.data()[0] / labels.len() as Scalar;
                let c = probs.cols();
                let mut d = probs.data().to_vec();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::new(probs.rows(), c, d)?);
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::full(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::full(r, c, g.data()[0] / (r * c) as Scalar));
            }
            Op::MeanRows(a) => {
                let [r, c] = val(*a).shape();
                let inv = 1.0 / r as Scalar;
                let row: Vec<Scalar> = g.data().iter().map(|v| v * inv).collect();
                let data = (0..r).flat_map(|_| row.iter().copied()).collect();
                acc(*a, Tensor::new(r, c, data)?);
            }
            Op::Concat { parts, axis } => {
                let mut off = 0;
                for p in parts {
                    let [r, c] = val(*p).shape();
                    if wants(*p) {
                        let piece = match axis {
                            Axis::Rows => {
                                let cols = g.cols();
                                Tensor::new(r, c, g.data()[off * cols..(off + r) * cols].to_vec())?
                            }
                            Axis::Cols => {
                                let mut d = Vec::with_capacity(r * c);
                                for row in 0..r {
                                    d.extend_from_slice(&g.row_slice(row)[off..off + c]);
                                }
                                Tensor::new(r, c, d)?
                            }
                        };
                        acc(*p, piece);
                    }
                    off += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Slice { src, axis, start } => {
                let [r, c] = val(*src).shape();
                let mut d = Tensor::zeros(r, c);
                match axis {
                    Axis::Rows => {
                        let n = g.len();
                        d.data_mut()[start * c..start * c + n].copy_from_slice(g.data());
                    }
                    Axis::Cols => {
                        let w = g.cols();
                        for row in 0..r {
                            d.data_mut()[row * c + start..row * c + start + w]
                                .copy_from_slice(g.row_slice(row));
                        }
                    }
                }
                acc(*src, d);
            }
            Op::Reshape(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, g.clone().reshaped(r, c)?);
            }
            Op::LstmGates { pre, c_prev, acts } => {
                let tc = val(*c_prev);
                let (n, h) = (tc.rows(), tc.cols());
                // dL/dc for the new cell, shared by both outputs.
                let dc_of = |gr: &[Scalar], q: &[Scalar], j: usize| {
                    let t = q[4 * h + j];
                    gr[h + j] + gr[j] * q[2 * h + j] * (1.0 - t * t)
                };
                let mut dpre = vec![0.0; n * 4 * h];
                exec::for_each_row_chunk(&mut dpre, 4 * h, |r0, chunk| {
                    for (i, dp) in chunk.chunks_mut(4 * h).enumerate() {
                        let r = r0 + i;
                        let q = acts.row_slice(r);
                        let cp = tc.row_slice(r);
                        let gr = g.row_slice(r);
                        for j in 0..h {
                            let (f, ig, o, a, t) = (q[j], q[h + j], q[2 * h + j], q[3 * h + j], q[4 * h + j]);
                            let dc = dc_of(gr, q, j);
                            dp[j] = dc * cp[j] * f * (1.0 - f);
                            dp[h + j] = dc * a * ig * (1.0 - ig);
                            dp[2 * h + j] = gr[j] * t * o * (1.0 - o);
                            dp[3 * h + j] = dc * ig * (1.0 - a * a);
                        }
                    }
                });
                if wants(*c_prev) {
                    let mut dcp = vec![0.0; n * h];
                    exec::for_each_row_chunk(&mut dcp, h, |r0, chunk| {
                        for (i, d) in chunk.chunks_mut(h).enumerate() {
                            let q = acts.row_slice(r0 + i);
                            let gr = g.row_slice(r0 + i);
                            for j in 0..h {
                                d[j] = dc_of(gr, q, j) * q[j];
                            }
                        }
                    });
                    acc(*c_prev, Tensor::new(n, h, dcp)?);
                }
                if wants(*pre) {
                    acc(*pre, Tensor::new(n, 4 * h, dpre)?);
                }
            }
        }
        Ok(())
    }
}
