//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, gemm, gemm_nt, gemm_tn};
use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Mul,
    AddBias,
    MaskCols,
    Scale,
    ScaleBy,
    Exp,
    Gelu,
    LayerNorm,
    SoftmaxRows,
    LogSoftmaxRows,
    Transpose,
    Gather,
    SegmentMean,
    L2NormalizeRows,
    Attention,
    Sum,
    Mean,
    CrossEntropyDiag,
    SoftCrossEntropy,
    Mse,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MaskCols(Var, Vec<S>),
    Scale(Var, S),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        seg: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        active: Vec<bool>,
        probs: Vec<Vec<S>>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropyDiag {
        x: Var,
        probs: Vec<S>,
    },
    SoftCrossEntropy {
        x: Var,
        target: Vec<S>,
        probs: Vec<S>,
    },
    Mse {
        x: Var,
        target: Vec<S>,
    },
}

impl<S> Op<S> {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::MatMul(..) => OpTag::MatMul,
            Op::MatMulNt(..) => OpTag::MatMulNt,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::AddBias(..) => OpTag::AddBias,
            Op::MaskCols(..) => OpTag::MaskCols,
            Op::Scale(..) => OpTag::Scale,
            Op::ScaleBy(..) => OpTag::ScaleBy,
            Op::Exp(..) => OpTag::Exp,
            Op::Gelu(..) => OpTag::Gelu,
            Op::LayerNorm { .. } => OpTag::LayerNorm,
            Op::SoftmaxRows(..) => OpTag::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpTag::LogSoftmaxRows,
            Op::Transpose(..) => OpTag::Transpose,
            Op::Gather { .. } => OpTag::Gather,
            Op::SegmentMean { .. } => OpTag::SegmentMean,
            Op::L2NormalizeRows { .. } => OpTag::L2NormalizeRows,
            Op::Attention { .. } => OpTag::Attention,
            Op::Sum(..) => OpTag::Sum,
            Op::Mean(..) => OpTag::Mean,
            Op::CrossEntropyDiag { .. } => OpTag::CrossEntropyDiag,
            Op::SoftCrossEntropy { .. } => OpTag::SoftCrossEntropy,
            Op::Mse { .. } => OpTag::Mse,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// A computation graph. Confined to one thread; build a fresh one per step.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: {a:?} vs {b:?}"))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn op_tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].op.tag()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient, or zeros of the value's shape if nothing flowed into `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<S> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err(name, x.shape(), y.shape()));
        }
        x.zip_map(y, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(dim_err("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Multiplies column `j` by the constant `mask[j]`.
    pub fn mask_cols(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if mask.len() != n {
            return Err(Error::Dimension(format!(
                "mask_cols: {} columns, mask of {}",
                n,
                mask.len()
            )));
        }
        let data = xv
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(&mask).map(|(&v, &m)| v * m))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskCols(x, mask), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension("scale_by needs a single-element scale".into()));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(s) || self.rg(x);
        Ok(self.push(out, Op::ScaleBy(s, x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(S::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(dim_err("layer_norm", xv.shape(), g.shape()));
        }
        let stats = kernels::layer_norm_stats(xv, eps);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            kernels::affine_rows(&stats.xhat, d, g.data(), b.data()),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = kernels::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = kernels::log_softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmaxRows(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = kernels::transpose(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Rows `idx` of `table`, in order (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let rows = tv.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("index {bad} out of range for {rows} rows")));
        }
        let out = tv.select_rows(idx);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Result<Var> {
        let out = kernels::segment_mean(self.value(x), seg)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMean { x, seg }, rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<S> = xv
            .data()
            .chunks(xv.cols().max(1))
            .map(|r| r.iter().map(|&v| v * v).sum::<S>().sqrt())
            .collect();
        let out = kernels::l2_normalize_rows(xv);
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Multi-head scaled dot-product self-attention without masking, applied
    /// independently to each block of `seq` rows. Heads with `active[h] ==
    /// false` are not computed and their output columns are zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        active: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, w) = qv.dims2();
        if kv.dims2() != (m, w) || vv.dims2() != (m, w) {
            return Err(dim_err("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || w % heads != 0 || seq == 0 || m % seq != 0 || active.len() != heads {
            return Err(Error::Dimension(format!(
                "attention: {m}×{w} with {heads} heads, seq {seq}, mask {}",
                active.len()
            )));
        }
        let dh = w / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![S::zero(); m * w];
        let mut probs = Vec::new();
        for b in 0..m / seq {
            let r0 = b * seq;
            for h in (0..heads).filter(|&h| active[h]) {
                let c0 = h * dh;
                let mut p = vec![S::zero(); seq * seq];
                for i in 0..seq {
                    let qi = &qd[(r0 + i) * w + c0..(r0 + i) * w + c0 + dh];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(r0 + j) * w + c0..(r0 + j) * w + c0 + dh];
                        *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale;
                    }
                    kernels::softmax_in_place(row);
                }
                for i in 0..seq {
                    let dst = &mut out[(r0 + i) * w + c0..(r0 + i) * w + c0 + dh];
                    for j in 0..seq {
                        let pij = p[i * seq + j];
                        let vj = &vd[(r0 + j) * w + c0..(r0 + j) * w + c0 + dh];
                        for (o, &x) in dst.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let out = Tensor::from_parts(vec![m, w], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                active: active.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / S::from_usize(xv.len()).unwrap());
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean over rows of `-log softmax(row)[row index]` for a square matrix.
    pub fn cross_entropy_diag(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        if m != n {
            return Err(Error::Dimension(format!("cross_entropy_diag on {m}×{n}")));
        }
        let logp = kernels::log_softmax_rows(xv);
        let loss = -(0..n).map(|i| logp.at(i, i)).sum::<S>() / S::from_usize(n).unwrap();
        let probs = logp.data().iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyDiag { x, probs }, rg))
    }

    /// Mean over rows of `-Σ target_row · log softmax(row)`; `target` rows are
    /// probability vectors and receive no gradient.
    pub fn soft_cross_entropy(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(dim_err("soft_cross_entropy", xv.shape(), target.shape()));
        }
        let m = xv.rows();
        let logp = kernels::log_softmax_rows(xv);
        let loss = -logp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| if t == S::zero() { S::zero() } else { t * l })
            .sum::<S>()
            / S::from_usize(m).unwrap();
        let probs = logp.data().iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                x,
                target: target.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(dim_err("mse", xv.shape(), target.shape()));
        }
        let n = S::from_usize(xv.len()).unwrap();
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            / n;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                x,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::from_parts(self.value(loss).shape().to_vec(), vec![S::one()]);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (var, delta) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[var.0].grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let node = &self.nodes[i];
        let gd = g.data();
        let like = |v: Var, data: Vec<S>| Tensor::from_parts(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                let mut out = Vec::new();
                if self.rg(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt(m, n, k, gd, self.value(*b).data(), &mut da);
                    out.push((*a, like(*a, da)));
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn(m, k, n, self.value(*a).data(), gd, &mut db);
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::MatMulNt(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                let mut out = Vec::new();
                if self.rg(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(m, n, k, gd, self.value(*b).data(), &mut da);
                    out.push((*a, like(*a, da)));
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); n * k];
                    gemm_tn(m, n, k, gd, self.value(*a).data(), &mut db);
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, like(*a, gd.iter().zip(bv).map(|(&x, &y)| x * y).collect())),
                    (*b, like(*b, gd.iter().zip(av).map(|(&x, &y)| x * y).collect())),
                ]
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![S::zero(); n];
                for row in gd.chunks(n.max(1)) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, like(*bias, db))]
            }
            Op::MaskCols(x, mask) => {
                let n = mask.len();
                let dx = gd
                    .chunks(n.max(1))
                    .flat_map(|row| row.iter().zip(mask).map(|(&v, &m)| v * m))
                    .collect();
                vec![(*x, like(*x, dx))]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::ScaleBy(s, x) => {
                let c = self.value(*s).item();
                let xv = self.value(*x).data();
                let ds = gd.iter().zip(xv).map(|(&a, &b)| a * b).sum::<S>();
                vec![(*s, like(*s, vec![ds])), (*x, g.map(|v| v * c))]
            }
            Op::Exp(x) => {
                let y = node.value.data();
                vec![(*x, like(*x, gd.iter().zip(y).map(|(&a, &b)| a * b).collect()))]
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&a, &v)| a * kernels::gelu_grad_scalar(v))
                    .collect();
                vec![(*x, like(*x, dx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let dn = S::from_usize(d).unwrap();
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let mut dx = Vec::with_capacity(gd.len());
                for (r, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dh = S::zero();
                    let mut sum_dh_h = S::zero();
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        dx.push(inv / dn * (dn * dh - sum_dh - hrow[j] * sum_dh_h));
                    }
                }
                vec![
                    (*x, like(*x, dx)),
                    (*gamma, like(*gamma, dgamma)),
                    (*beta, like(*beta, dbeta)),
                ]
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n.max(1)).zip(gd.chunks(n.max(1))) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::LogSoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n.max(1)).zip(gd.chunks(n.max(1))) {
                    let total = gr.iter().copied().sum::<S>();
                    dx.extend(yr.iter().zip(gr).map(|(&l, &b)| b - l.exp() * total));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Transpose(x) => vec![(*x, kernels::transpose(g))],
            Op::Gather { table, idx } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut dt = vec![S::zero(); tv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut dt[src * n..(src + 1) * n];
                    for (d, &v) in dst.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                vec![(*table, like(*table, dt))]
            }
            Op::SegmentMean { x, seg } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let inv = S::one() / S::from_usize(*seg).unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    let b = r / seg;
                    dx.extend(gd[b * d..(b + 1) * d].iter().map(|&v| v * inv));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.chunks(n.max(1)).zip(gd.chunks(n.max(1))).zip(norms) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| (b - a * dot) / norm));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                active,
                probs,
            } => self.attention_grads(*q, *k, *v, *heads, *seq, active, probs, gd),
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), gd[0]))],
            Op::Mean(x) => {
                let xv = self.value(*x);
                let c = gd[0] / S::from_usize(xv.len()).unwrap();
                vec![(*x, Tensor::full(xv.shape(), c))]
            }
            Op::CrossEntropyDiag { x, probs } => {
                let n = self.value(*x).cols();
                let c = gd[0] / S::from_usize(n).unwrap();
                let mut dx: Vec<S> = probs.iter().map(|&p| p * c).collect();
                for i in 0..n {
                    dx[i * n + i] -= c;
                }
                vec![(*x, like(*x, dx))]
            }
            Op::SoftCrossEntropy { x, target, probs } => {
                let m = self.value(*x).rows();
                let c = gd[0] / S::from_usize(m).unwrap();
                let n = self.value(*x).cols();
                let mut dx = Vec::with_capacity(probs.len());
                for (pr, tr) in probs.chunks(n.max(1)).zip(target.chunks(n.max(1))) {
                    let mass = tr.iter().copied().sum::<S>();
                    dx.extend(pr.iter().zip(tr).map(|(&p, &t)| c * (p * mass - t)));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let c = S::of(2.0) * gd[0] / S::from_usize(xv.len()).unwrap();
                let dx = xv.iter().zip(target).map(|(&a, &b)| c * (a - b)).collect();
                vec![(*x, like(*x, dx))]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        active: &[bool],
        probs: &[Vec<S>],
        gd: &[S],
    ) -> Vec<(Var, Tensor<S>)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, w) = qv.dims2();
        let dh = w / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dq = vec![S::zero(); m * w];
        let mut dk = vec![S::zero(); m * w];
        let mut dv = vec![S::zero(); m * w];
        let mut ds = vec![S::zero(); seq * seq];
        let mut p_iter = probs.iter();
        for b in 0..m / seq {
            let r0 = b * seq;
            for h in (0..heads).filter(|&h| active[h]) {
                let c0 = h * dh;
                let p = p_iter.next().expect("one probability block per active head");
                let at = |r: usize| (r0 + r) * w + c0..(r0 + r) * w + c0 + dh;
                // dV = Pᵀ dO and dP = dO Vᵀ, then the softmax Jacobian.
                for i in 0..seq {
                    let go = &gd[at(i)];
                    let mut dot = S::zero();
                    for j in 0..seq {
                        let pij = p[i * seq + j];
                        let vj = &vd[at(j)];
                        let dp = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<S>();
                        ds[i * seq + j] = dp;
                        dot += dp * pij;
                        let dvj = &mut dv[at(j)];
                        for (d, &x) in dvj.iter_mut().zip(go) {
                            *d += pij * x;
                        }
                    }
                    for j in 0..seq {
                        ds[i * seq + j] = p[i * seq + j] * (ds[i * seq + j] - dot) * scale;
                    }
                }
                for i in 0..seq {
                    for j in 0..seq {
                        let s = ds[i * seq + j];
                        if s == S::zero() {
                            continue;
                        }
                        let (qi, kj) = (at(i), at(j));
                        for c in 0..dh {
                            dq[qi.start + c] += s * kd[kj.start + c];
                            dk[kj.start + c] += s * qd[qi.start + c];
                        }
                    }
                }
            }
        }
        let shape = vec![m, w];
        vec![
            (q, Tensor::from_parts(shape.clone(), dq)),
            (k, Tensor::from_parts(shape.clone(), dk)),
            (v, Tensor::from_parts(shape, dv)),
        ]
    }
}
