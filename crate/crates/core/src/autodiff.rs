//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each recorded operation
//! stores handles to its inputs plus whatever it needs for its backward
//! rule; [`Tape::backward`] consumes the tape and returns gradients for every
//! leaf that was created with `requires_grad`.
//!
//! Every non-leaf operation charges an analytic FLOP count (see [`flops`])
//! and fires the optional observer hook exactly once.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Analytic forward FLOP counts per operation.
///
/// Shared by the tape and by [`crate::accounting::forward_flops_estimate`].
pub mod flops {
    pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
        2 * (m * k * n) as u64
    }

    /// Add, subtract, multiply, scale, broadcasts and pointwise nonlinearities.
    pub fn elementwise(numel: usize) -> u64 {
        numel as u64
    }

    pub fn layer_norm(rows: usize, cols: usize) -> u64 {
        5 * (rows * cols) as u64
    }

    pub fn causal_attention(batch: usize, seq: usize, heads: usize, head_dim: usize) -> u64 {
        let tt = (seq * seq) as u64;
        (batch * heads) as u64 * (4 * tt * head_dim as u64 + 4 * tt)
    }

    pub fn cross_entropy(rows: usize, classes: usize) -> u64 {
        3 * (rows * classes) as u64
    }

    pub fn mse(numel: usize) -> u64 {
        3 * numel as u64
    }

    pub fn col_norm_scale(rows: usize, cols: usize) -> u64 {
        4 * (rows * cols) as u64
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Tensor,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    ColNormScale {
        v: Var,
        mag: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::AddTiled(..) => "add_tiled",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Sum(_) => "sum",
            Op::Mse { .. } => "mse",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ColNormScale { .. } => "col_norm_scale",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddTiled(a, b) => vec![*a, *b],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Tanh(a) | Op::Gelu(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::Mse { pred, .. } => vec![*pred],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ColNormScale { v, mag, .. } => vec![*v, *mag],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    flops: u64,
}

type Hook = Box<dyn FnMut(&'static str, u64)>;

/// Operation recorder for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
    ops: Cell<u64>,
    hook: RefCell<Option<Hook>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
            ops: Cell::new(0),
            hook: RefCell::new(None),
        }
    }

    /// A tape whose hook observes `(op name, flops)` for every recorded op.
    pub fn with_hook(hook: impl FnMut(&'static str, u64) + 'static) -> Self {
        let tape = Tape::new();
        *tape.hook.borrow_mut() = Some(Box::new(hook));
        tape
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            flops: 0,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        if !t.is_scalar() {
            return Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    /// Forward FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Number of non-leaf operations recorded so far.
    pub fn op_count(&self) -> u64 {
        self.ops.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, flops: u64) -> Result<Var> {
        let name = op.name();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|i| nodes[i.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
            flops,
        });
        let id = nodes.len() - 1;
        drop(nodes);
        self.flops.set(self.flops.get() + flops);
        self.ops.set(self.ops.get() + 1);
        if let Some(hook) = self.hook.borrow_mut().as_mut() {
            hook(name, flops);
        }
        Ok(Var(id))
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, m, k, n) = self.with2(a, b, |x, y| -> Result<_> {
            let (m, k) = x.dims2()?;
            let (k2, n) = y.dims2()?;
            if k != k2 {
                return Err(Error::Dimension {
                    op: "matmul",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            matmul_into(x.data(), y.data(), &mut out, m, k, n);
            Ok((out, m, k, n))
        })?;
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            flops::matmul(m, k, n),
        )
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let t = self.with1(a, |x| x.transpose())?;
        self.push(t, Op::Transpose(a), 0)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.with2(a, b, |x, y| x.add(y))?;
        let n = t.numel();
        self.push(t, Op::Add(a, b), flops::elementwise(n))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.with2(a, b, |x, y| x.sub(y))?;
        let n = t.numel();
        self.push(t, Op::Sub(a, b), flops::elementwise(n))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.with2(a, b, |x, y| x.zip_map(y, "mul", |p, q| p * q))?;
        let n = t.numel();
        self.push(t, Op::Mul(a, b), flops::elementwise(n))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let t = self.with1(a, |x| x.scale(c));
        let n = t.numel();
        self.push(t, Op::Scale(a, c), flops::elementwise(n))
    }

    /// `x[m×n] + b[n]`, broadcast over rows.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let t = self.with2(x, b, |x, b| -> Result<Tensor> {
            let (_, n) = x.dims2()?;
            if b.numel() != n || b.ndim() != 1 {
                return Err(Error::Dimension {
                    op: "add_row",
                    left: x.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok(out)
        })?;
        let n = t.numel();
        self.push(t, Op::AddRow(x, b), flops::elementwise(n))
    }

    /// `x[(reps·r)×c] + p[r×c]`, with `p` repeated down the rows of `x`.
    pub fn add_tiled(&self, x: Var, p: Var) -> Result<Var> {
        let t = self.with2(x, p, |x, p| -> Result<Tensor> {
            let (xr, xc) = x.dims2()?;
            let (pr, pc) = p.dims2()?;
            if xc != pc || xr % pr != 0 {
                return Err(Error::Dimension {
                    op: "add_tiled",
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            let block = pr * pc;
            for chunk in out.data_mut().chunks_mut(block) {
                for (o, &pv) in chunk.iter_mut().zip(p.data()) {
                    *o += pv;
                }
            }
            Ok(out)
        })?;
        let n = t.numel();
        self.push(t, Op::AddTiled(x, p), flops::elementwise(n))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let t = self.with1(a, |x| x.map(f64::tanh));
        let n = t.numel();
        self.push(t, Op::Tanh(a), flops::elementwise(n))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let t = self.with1(a, |x| {
            x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        });
        let n = t.numel();
        self.push(t, Op::Gelu(a), flops::elementwise(n))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let (s, n) = self.with1(a, |x| (x.sum(), x.numel()));
        self.push(Tensor::scalar(s), Op::Sum(a), flops::elementwise(n))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&self, pred: Var, target: &Tensor) -> Result<Var> {
        let (loss, n) = self.with1(pred, |p| -> Result<_> {
            p.expect_same_shape(target, "mse")?;
            let n = p.numel();
            let s: f64 = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok((s / n as f64, n))
        })?;
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            flops::mse(n),
        )
    }

    /// Row-wise layer normalization with learned `gain` and `bias` (length = cols).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
        let (rows, cols) = xv.dims2()?;
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        drop(nodes);
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            flops::layer_norm(rows, cols),
        )
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.with1(table, |t| -> Result<Tensor> {
            let (rows, cols) = t.dims2()?;
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::contract(format!(
                        "gather index {id} out of range for {rows} rows"
                    )));
                }
                out.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), cols, out)
        })?;
        self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            0,
        )
    }

    /// Multi-head causal self-attention over `batch` sequences of length `seq`.
    ///
    /// `q`, `k`, `v` are `(batch·seq)×d` with heads laid out as contiguous
    /// column blocks of width `d / heads`.
    pub fn causal_attention(&self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let (rows, d) = qv.dims2()?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::Dimension {
                op: "causal_attention",
                left: qv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention layout {rows}×{d} incompatible with batch={batch} seq={seq} heads={heads}"
            )));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let prow = &mut probs[p_base + i * seq..p_base + (i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * inv;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for p in prow.iter_mut().take(i + 1) {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    for p in prow.iter_mut().take(i + 1) {
                        *p /= z;
                    }
                    let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for (j, &pj) in prow.iter().enumerate().take(i + 1) {
                        let vj = &vd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        drop(nodes);
        self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            flops::causal_attention(batch, seq, heads, dh),
        )
    }

    /// Weighted mean of per-row softmax cross-entropy.
    ///
    /// `weights` doubles as a loss mask; rows with weight 0 do not contribute.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[logits.0].value;
        let (rows, classes) = lv.dims2()?;
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let weights = match weights {
            Some(w) if w.len() != rows => {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    left: lv.shape().to_vec(),
                    right: vec![w.len()],
                })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::contract("cross_entropy: loss mask selects no positions"));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= classes {
                return Err(Error::contract(format!(
                    "target class {t} out of range for {classes} classes"
                )));
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (log_z - row[t]);
            }
        }
        drop(nodes);
        self.push(
            Tensor::scalar(loss / total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            flops::cross_entropy(rows, classes),
        )
    }

    /// `out[:, j] = mag[j] · v[:, j] / ‖v[:, j]‖₂`.
    pub fn col_norm_scale(&self, v: Var, mag: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (vv, mv) = (&nodes[v.0].value, &nodes[mag.0].value);
        let (rows, cols) = vv.dims2()?;
        if mv.numel() != cols {
            return Err(Error::Dimension {
                op: "col_norm_scale",
                left: vv.shape().to_vec(),
                right: mv.shape().to_vec(),
            });
        }
        let norms = column_norms(vv);
        if norms.contains(&0.0) {
            return Err(Error::NonFinite {
                op: "col_norm_scale",
            });
        }
        let scales: Vec<f64> = mv.data().iter().zip(&norms).map(|(m, n)| m / n).collect();
        let mut out = vv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, s) in row.iter_mut().zip(&scales) {
                *o *= s;
            }
        }
        drop(nodes);
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ColNormScale { v, mag, norms },
            flops::col_norm_scale(rows, cols),
        )
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut backward_flops = 0u64;

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |v: Var| nodes[v.0].needs_grad;
            let val = |v: Var| &nodes[v.0].value;
            backward_flops += 2 * node.flops;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let (_, n) = val(*b).dims2()?;
                    if needs(*a) {
                        // dA = G · Bᵀ
                        let bt = val(*b).transpose()?;
                        let mut da = vec![0.0; m * k];
                        matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                        accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    }
                    if needs(*b) {
                        // dB = Aᵀ · G
                        let at = val(*a).transpose()?;
                        let mut db = vec![0.0; k * n];
                        matmul_into(at.data(), g.data(), &mut db, k, m, n);
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::Transpose(a) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.transpose()?);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
                    }
                }
                Op::Scale(a, c) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.scale(*c));
                    }
                }
                Op::AddRow(x, b) => {
                    if needs(*b) {
                        let n = val(*b).numel();
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![n], db));
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::AddTiled(x, p) => {
                    if needs(*p) {
                        let pshape = val(*p).shape().to_vec();
                        let block = val(*p).numel();
                        let mut dp = vec![0.0; block];
                        for chunk in g.data().chunks(block) {
                            for (d, &v) in dp.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *p, Tensor::from_parts(pshape, dp));
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Tanh(a) => {
                    if needs(*a) {
                        let dy = g.zip_map(&node.value, "tanh", |gv, y| gv * (1.0 - y * y))?;
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Gelu(a) => {
                    if needs(*a) {
                        let dy = g.zip_map(val(*a), "gelu", |gv, x| gv * gelu_grad(x))?;
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Sum(a) => {
                    if needs(*a) {
                        let s = g.data()[0];
                        accumulate(&mut grads, *a, Tensor::filled(val(*a).shape(), s));
                    }
                }
                Op::Mse { pred, target } => {
                    if needs(*pred) {
                        let p = val(*pred);
                        let c = 2.0 * g.data()[0] / p.numel() as f64;
                        let dp = p.zip_map(target, "mse", |a, b| c * (a - b))?;
                        accumulate(&mut grads, *pred, dp);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = val(*x).dims2()?;
                    let gd = g.data();
                    if needs(*gain) || needs(*bias) {
                        let mut dg = vec![0.0; cols];
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[c] += gd[r * cols + c] * xhat[r * cols + c];
                                db[c] += gd[r * cols + c];
                            }
                        }
                        if needs(*gain) {
                            let shape = val(*gain).shape().to_vec();
                            accumulate(&mut grads, *gain, Tensor::from_parts(shape, dg));
                        }
                        if needs(*bias) {
                            let shape = val(*bias).shape().to_vec();
                            accumulate(&mut grads, *bias, Tensor::from_parts(shape, db));
                        }
                    }
                    if needs(*x) {
                        let gain_v = val(*gain).data();
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for c in 0..cols {
                                let dh = gd[r * cols + c] * gain_v[c];
                                mean_d += dh;
                                mean_dh += dh * xhat[r * cols + c];
                            }
                            mean_d /= cols as f64;
                            mean_dh /= cols as f64;
                            for c in 0..cols {
                                let dh = gd[r * cols + c] * gain_v[c];
                                dx[r * cols + c] =
                                    rstd[r] * (dh - mean_d - xhat[r * cols + c] * mean_dh);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_parts(vec![rows, cols], dx));
                    }
                }
                Op::Gather { table, ids } => {
                    if needs(*table) {
                        let (rows, cols) = val(*table).dims2()?;
                        let mut dt = vec![0.0; rows * cols];
                        for (i, &id) in ids.iter().enumerate() {
                            let src = &g.data()[i * cols..(i + 1) * cols];
                            for (d, &s) in dt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *table, Tensor::from_parts(vec![rows, cols], dt));
                    }
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        val(*q),
                        val(*k),
                        val(*v),
                        &g,
                        probs,
                        *batch,
                        *seq,
                        *heads,
                    );
                    if needs(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if needs(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if needs(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    if needs(*logits) {
                        let shape = val(*logits).shape().to_vec();
                        let classes = shape[1];
                        let total: f64 = weights.iter().sum();
                        let gs = g.data()[0] / total;
                        let mut dl = probs.clone();
                        for (r, &t) in targets.iter().enumerate() {
                            let w = weights[r] * gs;
                            let row = &mut dl[r * classes..(r + 1) * classes];
                            row[t] -= 1.0;
                            for x in row.iter_mut() {
                                *x *= w;
                            }
                        }
                        accumulate(&mut grads, *logits, Tensor::from_parts(shape, dl));
                    }
                }
                Op::ColNormScale { v, mag, norms } => {
                    let vv = val(*v);
                    let (rows, cols) = vv.dims2()?;
                    let mv = val(*mag).data();
                    // proj[j] = Σ_i g_ij · v_ij / n_j
                    let mut proj = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            proj[c] += g.data()[r * cols + c] * vv.data()[r * cols + c] / norms[c];
                        }
                    }
                    if needs(*mag) {
                        let shape = val(*mag).shape().to_vec();
                        accumulate(&mut grads, *mag, Tensor::from_parts(shape, proj.clone()));
                    }
                    if needs(*v) {
                        let mut dv = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                let u = vv.data()[r * cols + c] / norms[c];
                                dv[r * cols + c] =
                                    mv[c] / norms[c] * (g.data()[r * cols + c] - u * proj[c]);
                            }
                        }
                        accumulate(&mut grads, *v, Tensor::from_parts(vec![rows, cols], dv));
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out.insert(Var(id), g);
            }
        }
        Ok(Gradients {
            grads: out,
            backward_flops,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
    backward_flops: u64,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Approximate exact cost of the backward pass (twice the forward cost
    /// of every differentiated op).
    pub fn backward_flops(&self) -> u64 {
        self.backward_flops
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn column_norms(m: &Tensor) -> Vec<f64> {
    let cols = m.shape()[1];
    let mut sq = vec![0.0; cols];
    for row in m.data().chunks(cols) {
        for (s, x) in sq.iter_mut().zip(row) {
            *s += x * x;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    probs: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let d = q.shape()[1];
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            let p_base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let ri = (b * seq + i) * d + off;
                let prow = &probs[p_base + i * seq..p_base + (i + 1) * seq];
                let gi = &gd[ri..ri + dh];
                // dP_ij = dO_i · v_j ; dV_j += P_ij dO_i
                let mut dot = 0.0;
                for j in 0..=i {
                    let rj = (b * seq + j) * d + off;
                    let vj = &vd[rj..rj + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    dot += dp[j] * prow[j];
                    for (x, &gv) in dv[rj..rj + dh].iter_mut().zip(gi) {
                        *x += prow[j] * gv;
                    }
                }
                // dS_ij = P_ij (dP_ij − Σ_l P_il dP_il)
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * inv;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = (b * seq + j) * d + off;
                    for t in 0..dh {
                        dq[ri + t] += ds * kd[rj + t];
                        dk[rj + t] += ds * qd[ri + t];
                    }
                }
            }
        }
    }
    let shape = q.shape().to_vec();
    (
        Tensor::from_parts(shape.clone(), dq),
        Tensor::from_parts(shape.clone(), dk),
        Tensor::from_parts(shape, dv),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(out), Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));

        let b = tape.constant(Tensor::from_rows(&[[1.0], [2.0]]));
        let a2 = tape.constant(Tensor::from_rows(&[[3.0, 4.0]]));
        let ba = tape.matmul(b, a2).unwrap();
        assert_eq!(tape.value(ba), Tensor::from_rows(&[[3.0, 4.0], [6.0, 8.0]]));

        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let zb = tape.matmul(z, a).unwrap();
        assert_eq!(tape.value(zb), Tensor::zeros(&[3, 2]));
        assert_eq!(tape.flops(), 2 * 2 * 2 * 2 + 2 * 2 * 1 * 2 + 2 * 3 * 2 * 2);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 7.0]]), true);
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_half_squared_distance() {
        let c = Tensor::vector(vec![1.0, 2.0, -3.0]);
        let w0 = Tensor::vector(vec![0.5, -1.0, 4.0]);
        let tape = Tape::new();
        let w = tape.leaf(w0.clone(), true);
        let cv = tape.constant(c.clone());
        let d = tape.sub(w, cv).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap(), &w0.sub(&c).unwrap());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let y = tape.scale(w, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1e308, 1e308]), true);
        assert!(matches!(tape.scale(w, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn hook_fires_once_per_op() {
        use std::rc::Rc;
        let seen = Rc::new(Cell::new((0u64, 0u64)));
        let s2 = seen.clone();
        let tape = Tape::with_hook(move |_, f| {
            let (n, t) = s2.get();
            s2.set((n + 1, t + f));
        });
        let a = tape.leaf(Tensor::ones(&[3, 4]), true);
        let b = tape.constant(Tensor::ones(&[4, 2]));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.tanh(c).unwrap();
        let _ = tape.sum(d).unwrap();
        assert_eq!(seen.get().0, 3);
        assert_eq!(tape.op_count(), 3);
        assert_eq!(seen.get().1, tape.flops());
    }

    /// Central-difference check of each fused op through a random scalar projection.
    fn check_op(inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Var) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let out_shape = {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let o = f(&tape, &vars);
            tape.shape(o)
        };
        let proj = Tensor::new(
            out_shape.clone(),
            (0..out_shape.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let eval = |xs: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let o = f(&tape, &vars);
            tape.value(o).dot(&proj).unwrap()
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let o = f(&tape, &vars);
        let p = tape.constant(proj.clone());
        let m = tape.mul(o, p).unwrap();
        let s = tape.sum(m).unwrap();
        let grads = tape.backward(s).unwrap();
        let h = 1e-5;
        for (idx, var) in vars.iter().enumerate() {
            let g = grads.get(*var).unwrap();
            for e in 0..inputs[idx].numel() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(
                    close(g.data()[e], fd, 1e-6),
                    "input {idx} elem {e}: autodiff {} vs fd {fd}",
                    g.data()[e]
                );
            }
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fused_ops_match_finite_differences() {
        check_op(vec![rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)], |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        });
        check_op(vec![rand_tensor(&[4, 5], 3), rand_tensor(&[5], 4), rand_tensor(&[5], 5)], |t, v| {
            t.layer_norm(v[0], v[1], v[2]).unwrap()
        });
        check_op(
            vec![rand_tensor(&[6, 4], 6), rand_tensor(&[6, 4], 7), rand_tensor(&[6, 4], 8)],
            |t, v| t.causal_attention(v[0], v[1], v[2], 2, 3, 2).unwrap(),
        );
        check_op(vec![rand_tensor(&[5, 3], 9), rand_tensor(&[3], 10)], |t, v| {
            t.col_norm_scale(v[0], v[1]).unwrap()
        });
        check_op(vec![rand_tensor(&[3, 4], 11)], |t, v| t.gelu(v[0]).unwrap());
        check_op(vec![rand_tensor(&[3, 4], 12)], |t, v| t.tanh(v[0]).unwrap());
        check_op(vec![rand_tensor(&[6, 3], 13), rand_tensor(&[2, 3], 14)], |t, v| {
            t.add_tiled(v[0], v[1]).unwrap()
        });
        check_op(vec![rand_tensor(&[4, 3], 15), rand_tensor(&[3], 16)], |t, v| {
            t.add_row(v[0], v[1]).unwrap()
        });
        check_op(vec![rand_tensor(&[4, 3], 17)], |t, v| t.gather(v[0], &[0, 2, 2, 3, 1]).unwrap());
        check_op(vec![rand_tensor(&[4, 5], 18)], |t, v| {
            t.cross_entropy(v[0], &[1, 0, 4, 2], Some(&[1.0, 0.0, 1.0, 1.0])).unwrap()
        });
        let target = rand_tensor(&[3, 2], 19);
        check_op(vec![rand_tensor(&[3, 2], 20)], move |t, v| t.mse(v[0], &target).unwrap());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 7]));
        let ce = tape.cross_entropy(l, &[0, 3, 6], None).unwrap();
        assert!((tape.scalar(ce).unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_is_causal() {
        let q = rand_tensor(&[4, 4], 1);
        let k = rand_tensor(&[4, 4], 2);
        let v = rand_tensor(&[4, 4], 3);
        let run = |k: &Tensor, v: &Tensor| {
            let tape = Tape::new();
            let (a, b, c) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let o = tape.causal_attention(a, b, c, 1, 4, 2).unwrap();
            tape.value(o)
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..4 {
            k2.data_mut()[3 * 4 + c] += 1.0;
            v2.data_mut()[3 * 4 + c] -= 2.0;
        }
        let changed = run(&k2, &v2);
        assert_eq!(&base.data()[..12], &changed.data()[..12]);
        assert_ne!(&base.data()[12..], &changed.data()[12..]);
    }
}
