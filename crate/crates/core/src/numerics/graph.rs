//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in creation order, so node
//! inputs always precede the node itself and the tape is a topological order.
//! [`Graph::backward`] walks the tape once in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{
    axis_extents, broadcast_shape, broadcast_strides, for_each_broadcast, gemm_nn, gemm_nt,
    gemm_tn,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Abs,
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    CopyGrad {
        to: Var,
    },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        use Op::*;
        match self {
            Leaf => [None, None, None],
            Binary(_, a, b) | Matmul(a, b) | Bmm(a, b) | KlDiv(a, b) => [Some(*a), Some(*b), None],
            Unary(_, a)
            | Scale(a, _)
            | Reshape(a)
            | Permute(a, _)
            | Softmax(a, _)
            | Sum(a)
            | Mean(a)
            | MeanAxis(a, _) => [Some(*a), None, None],
            Normalize { x, .. } => [Some(*x), None, None],
            BatchNorm { x, gamma, beta, .. } => [Some(*x), Some(*gamma), Some(*beta)],
            CrossEntropy { logits, .. } => [Some(*logits), None, None],
            Gather { table, .. } => [Some(*table), None, None],
            Conv1d { x, w, b, .. } | ConvTranspose1d { x, w, b, .. } => {
                [Some(*x), Some(*w), Some(*b)]
            }
            CopyGrad { to } => [Some(*to), None, None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` does
    /// not lie on a path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Constant copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                ta.shape(),
                tb.shape()
            ))
        })?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Binary(kind, a, b), "binary")
    }

    /// Elementwise sum with NumPy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Abs => x.abs(),
                Unary::Relu => x.max(0.0),
                Unary::Sigmoid => sigmoid(x),
            })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Unary(kind, a), "unary")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.push(value, Op::Scale(a, c), "scale")
    }

    /// `a[..., m, k] x b[k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = ta.numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Matmul(a, b), "matmul")
    }

    /// Batched matrix product `a[b, m, k] x b[b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            gemm_nn(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bt, m, n], out)?;
        self.push(value, Op::Bmm(a, b), "bmm")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || core::mem::replace(&mut seen[x], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let out = permute_data(t.data(), t.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&i| t.shape()[i]).collect();
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Permute(a, axes.to_vec()), "permute")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_tensor(self.value(a), axis)?;
        self.push(value, Op::Softmax(a, axis), "softmax")
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().ok_or(Error::EmptyAxis)?;
        if width == 0 {
            return Err(Error::EmptyAxis);
        }
        let rows = t.numel() / width;
        let mut out = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::Normalize { x, inv_std }, "normalize")
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let scaled = self.mul(n, gain)?;
        self.add(scaled, bias)
    }

    /// Training-mode batch normalization of `x[b, c, t]` per channel `c`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("batch_norm expects [b, c, t], got {s:?}")));
        }
        let (b, c, len) = (s[0], s[1], s[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("batch_norm affine must be [{c}]")));
        }
        let count = b * len;
        if count == 0 {
            return Err(Error::EmptyAxis);
        }
        let d = t.data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * len;
                mean[ci] += d[off..off + len].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * len;
                var[ci] += d[off..off + len]
                    .iter()
                    .map(|v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * len;
                for i in off..off + len {
                    xhat[i] = (d[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + be[ci];
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm",
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Mean cross-entropy of `logits[n, k]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        let k = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
            return Err(Error::Shape(format!("target {bad} out of range for {k} classes")));
        }
        let probs = softmax_tensor(t, 1)?.into_data();
        let n = targets.len();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -libm::log(probs[i * k + y]))
            .sum::<f64>()
            / n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// `sum_rows KL(p_row || q_row)` for probability tensors of equal shape.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() {
            return Err(Error::Shape(format!(
                "kl_div {:?} vs {:?}",
                tp.shape(),
                tq.shape()
            )));
        }
        let mut total = 0.0;
        for (i, (&pv, &qv)) in tp.data().iter().zip(tq.data()).enumerate() {
            if pv > 0.0 {
                if qv <= 0.0 {
                    return Err(Error::InfiniteDivergence(i));
                }
                total += pv * (libm::log(pv) - libm::log(qv));
            }
        }
        self.push(Tensor::scalar(total), Op::KlDiv(p, q), "kl_div")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptyAxis);
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Axis {
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyAxis);
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MeanAxis(a, axis), "mean_axis")
    }

    /// Row lookup `table[indices[i], :]`, output `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("gather table must be 2-D, got {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Shape(format!("gather index {i} out of {rows} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            "gather",
        )
    }

    /// 1-D convolution: `x[b, ci, t]`, `w[co, ci, k]`, `b[co]` -> `[b, co, t']`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || tb.shape() != [sw[0]] {
            return Err(Error::Shape(format!(
                "conv1d x {sx:?} w {sw:?} b {:?}",
                tb.shape()
            )));
        }
        let (bn, ci, len) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        let out_len = conv_out_len(len, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv1d input length {len} too short")))?;
        let mut out = vec![0.0; bn * co * out_len];
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        for bi in 0..bn {
            for o in 0..co {
                let y = &mut out[(bi * co + o) * out_len..(bi * co + o + 1) * out_len];
                y.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..ci {
                    let xr = &xd[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                    for kk in 0..k {
                        let wv = wd[(o * ci + c) * k + kk];
                        for (to, yv) in y.iter_mut().enumerate() {
                            let ti = (to * stride + kk) as isize - pad as isize;
                            if ti >= 0 && (ti as usize) < len {
                                *yv += wv * xr[ti as usize];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![bn, co, out_len], out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv1d",
        )
    }

    /// Transposed 1-D convolution: `x[b, ci, t]`, `w[ci, co, k]`, `b[co]`;
    /// output length `(t - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] || tb.shape() != [sw[1]] {
            return Err(Error::Shape(format!(
                "conv_transpose1d x {sx:?} w {sw:?} b {:?}",
                tb.shape()
            )));
        }
        let (bn, ci, len) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[1], sw[2]);
        let full = (len.saturating_sub(1)) * stride + k;
        if stride == 0 || len == 0 || full <= 2 * pad {
            return Err(Error::Shape(format!("conv_transpose1d input length {len} too short")));
        }
        let out_len = full - 2 * pad;
        let mut out = vec![0.0; bn * co * out_len];
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        for bi in 0..bn {
            for o in 0..co {
                let y = &mut out[(bi * co + o) * out_len..(bi * co + o + 1) * out_len];
                y.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..ci {
                    let xr = &xd[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                    for kk in 0..k {
                        let wv = wd[(c * co + o) * k + kk];
                        for (ti, xv) in xr.iter().enumerate() {
                            let to = (ti * stride + kk) as isize - pad as isize;
                            if to >= 0 && (to as usize) < out_len {
                                y[to as usize] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![bn, co, out_len], out)?;
        self.push(
            value,
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv_transpose1d",
        )
    }

    /// Forward value of `value_from`, backward gradient routed to `grad_to`
    /// (straight-through estimator). `value_from` receives no gradient.
    pub fn copy_gradient(&mut self, value_from: Var, grad_to: Var) -> Result<Var> {
        if self.shape(value_from) != self.shape(grad_to) {
            return Err(Error::Shape(format!(
                "copy_gradient {:?} vs {:?}",
                self.shape(value_from),
                self.shape(grad_to)
            )));
        }
        let value = self.value(value_from).clone();
        self.push(value, Op::CopyGrad { to: grad_to }, "copy_gradient")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shapes[loss.0].clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            for input in node.op.inputs().iter().flatten() {
                if input.0 >= i {
                    return Err(Error::Cycle(i));
                }
            }
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Accumulates into input `v` when it needs a gradient.
        macro_rules! acc {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let numel = self.nodes[v.0].value.numel();
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let os = out.shape();
                let sa = broadcast_strides(ta.shape(), os);
                let sb = broadcast_strides(tb.shape(), os);
                let kind = *kind;
                acc!(*a, |buf: &mut Vec<f64>| {
                    let db = tb.data();
                    for_each_broadcast(os, &sa, &sb, |o, ia, ib| {
                        buf[ia] += match kind {
                            Binary::Add | Binary::Sub => g[o],
                            Binary::Mul => g[o] * db[ib],
                        }
                    });
                });
                acc!(*b, |buf: &mut Vec<f64>| {
                    let da = ta.data();
                    for_each_broadcast(os, &sa, &sb, |o, ia, ib| {
                        buf[ib] += match kind {
                            Binary::Add => g[o],
                            Binary::Sub => -g[o],
                            Binary::Mul => g[o] * da[ia],
                        }
                    });
                });
            }
            Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                let y = out.data();
                let kind = *kind;
                acc!(*a, |buf: &mut Vec<f64>| {
                    for j in 0..buf.len() {
                        buf[j] += g[j]
                            * match kind {
                                Unary::Abs => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else if x[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            };
                    }
                });
            }
            Op::Scale(a, c) => acc!(*a, |buf: &mut Vec<f64>| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b += gv * c;
                }
            }),
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.numel() / k.max(1);
                acc!(*a, |buf: &mut Vec<f64>| gemm_nt(g, tb.data(), buf, m, n, k));
                acc!(*b, |buf: &mut Vec<f64>| gemm_tn(ta.data(), g, buf, k, m, n));
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bt, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                acc!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..bt {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut buf[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc!(*b, |buf: &mut Vec<f64>| {
                    for i in 0..bt {
                        gemm_tn(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut buf[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Reshape(a) => acc!(*a, |buf: &mut Vec<f64>| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_data(g, out.shape(), &inverse);
                acc!(*a, |buf: &mut Vec<f64>| {
                    for (b, gv) in buf.iter_mut().zip(&back) {
                        *b += gv;
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + inn;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                buf[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Normalize { x, inv_std } => {
                let width = *out.shape().last().unwrap();
                let y = out.data();
                acc!(*x, |buf: &mut Vec<f64>| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * width..(r + 1) * width];
                        let ry = &y[r * width..(r + 1) * width];
                        let mg = rg.iter().sum::<f64>() / width as f64;
                        let mgy = rg.iter().zip(ry).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        for j in 0..width {
                            buf[r * width + j] += is * (rg[j] - mg - ry[j] * mgy);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = out.shape();
                let (bn, c, len) = (s[0], s[1], s[2]);
                let count = (bn * len) as f64;
                let gam = self.nodes[gamma.0].value.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..bn {
                    for ci in 0..c {
                        let off = (bi * c + ci) * len;
                        for j in off..off + len {
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * xhat[j];
                        }
                    }
                }
                acc!(*gamma, |buf: &mut Vec<f64>| {
                    for ci in 0..c {
                        buf[ci] += sum_gx[ci];
                    }
                });
                acc!(*beta, |buf: &mut Vec<f64>| {
                    for ci in 0..c {
                        buf[ci] += sum_g[ci];
                    }
                });
                acc!(*x, |buf: &mut Vec<f64>| {
                    for bi in 0..bn {
                        for ci in 0..c {
                            let off = (bi * c + ci) * len;
                            let (mg, mgx) = (sum_g[ci] / count, sum_gx[ci] / count);
                            for j in off..off + len {
                                buf[j] += gam[ci] * inv_std[ci] * (g[j] - mg - xhat[j] * mgx);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                acc!(*logits, |buf: &mut Vec<f64>| {
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            buf[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
            Op::KlDiv(p, q) => {
                let (pd, qd) = (self.nodes[p.0].value.data(), self.nodes[q.0].value.data());
                acc!(*p, |buf: &mut Vec<f64>| {
                    for j in 0..buf.len() {
                        if pd[j] > 0.0 {
                            buf[j] += g[0] * (libm::log(pd[j]) - libm::log(qd[j]) + 1.0);
                        }
                    }
                });
                acc!(*q, |buf: &mut Vec<f64>| {
                    for j in 0..buf.len() {
                        if pd[j] > 0.0 {
                            buf[j] -= g[0] * pd[j] / qd[j];
                        }
                    }
                });
            }
            Op::Sum(a) => acc!(*a, |buf: &mut Vec<f64>| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(a) => acc!(*a, |buf: &mut Vec<f64>| {
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|b| *b += s)
            }),
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.nodes[a.0].value.shape(), *axis);
                acc!(*a, |buf: &mut Vec<f64>| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                buf[(o * len + l) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = out.shape()[1];
                acc!(*table, |buf: &mut Vec<f64>| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            buf[idx * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (bn, ci, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, k) = (tw.shape()[0], tw.shape()[2]);
                let out_len = out.shape()[2];
                let (xd, wd) = (tx.data(), tw.data());
                let (stride, pad) = (*stride, *pad);
                acc!(*b, |buf: &mut Vec<f64>| {
                    for bi in 0..bn {
                        for o in 0..co {
                            let off = (bi * co + o) * out_len;
                            buf[o] += g[off..off + out_len].iter().sum::<f64>();
                        }
                    }
                });
                acc!(*w, |buf: &mut Vec<f64>| {
                    for bi in 0..bn {
                        for o in 0..co {
                            let gy = &g[(bi * co + o) * out_len..(bi * co + o + 1) * out_len];
                            for c in 0..ci {
                                let xr = &xd[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                                for kk in 0..k {
                                    let mut s = 0.0;
                                    for (to, gv) in gy.iter().enumerate() {
                                        let ti = (to * stride + kk) as isize - pad as isize;
                                        if ti >= 0 && (ti as usize) < len {
                                            s += gv * xr[ti as usize];
                                        }
                                    }
                                    buf[(o * ci + c) * k + kk] += s;
                                }
                            }
                        }
                    }
                });
                acc!(*x, |buf: &mut Vec<f64>| {
                    for bi in 0..bn {
                        for o in 0..co {
                            let gy = &g[(bi * co + o) * out_len..(bi * co + o + 1) * out_len];
                            for c in 0..ci {
                                let xb = &mut buf[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                                for kk in 0..k {
                                    let wv = wd[(o * ci + c) * k + kk];
                                    for (to, gv) in gy.iter().enumerate() {
                                        let ti = (to * stride + kk) as isize - pad as isize;
                                        if ti >= 0 && (ti as usize) < len {
                                            xb[ti as usize] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (bn, ci, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, k) = (tw.shape()[1], tw.shape()[2]);
                let out_len = out.shape()[2];
                let (xd, wd) = (tx.data(), tw.data());
                let (stride, pad) = (*stride, *pad);
                acc!(*b, |buf: &mut Vec<f64>| {
                    for bi in 0..bn {
                        for o in 0..co {
                            let off = (bi * co + o) * out_len;
                            buf[o] += g[off..off + out_len].iter().sum::<f64>();
                        }
                    }
                });
                acc!(*w, |buf: &mut Vec<f64>| {
                    for bi in 0..bn {
                        for o in 0..co {
                            let gy = &g[(bi * co + o) * out_len..(bi * co + o + 1) * out_len];
                            for c in 0..ci {
                                let xr = &xd[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                                for kk in 0..k {
                                    let mut s = 0.0;
                                    for (ti, xv) in xr.iter().enumerate() {
                                        let to = (ti * stride + kk) as isize - pad as isize;
                                        if to >= 0 && (to as usize) < out_len {
                                            s += gy[to as usize] * xv;
                                        }
                                    }
                                    buf[(c * co + o) * k + kk] += s;
                                }
                            }
                        }
                    }
                });
                acc!(*x, |buf: &mut Vec<f64>| {
                    for bi in 0..bn {
                        for o in 0..co {
                            let gy = &g[(bi * co + o) * out_len..(bi * co + o + 1) * out_len];
                            for c in 0..ci {
                                let xb = &mut buf[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                                for kk in 0..k {
                                    let wv = wd[(c * co + o) * k + kk];
                                    for (ti, xv) in xb.iter_mut().enumerate() {
                                        let to = (ti * stride + kk) as isize - pad as isize;
                                        if to >= 0 && (to as usize) < out_len {
                                            *xv += wv * gy[to as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CopyGrad { to } => acc!(*to, |buf: &mut Vec<f64>| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; rank];
    let mut out = vec![0.0; data.len()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, src, _| out[o] = data[src]);
    out
}

/// Softmax of a tensor along `axis` with max-subtraction.
pub fn softmax_tensor(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::Axis {
            axis,
            rank: t.rank(),
        });
    }
    let (outer, len, inner) = axis_extents(t.shape(), axis);
    if len == 0 {
        return Err(Error::EmptyAxis);
    }
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + inn;
            let max = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = libm::exp(d[idx(l)] - max);
                out[idx(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[idx(l)] /= z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
