//! Reverse-mode automatic differentiation over an explicit, per-step tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to produce parent gradients. Nodes are only ever appended, so a
//! node's parents always precede it and a single reverse sweep suffices.
//! A tape can be differentiated once; a second `backward` is rejected.

use std::borrow::Cow;

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[.., n] + bias[n]` broadcast over leading axes.
    AddBias(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Tensor),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    /// `softmax(q k^T)` over rows.
    AttentionWeights(Var, Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    /// Flat input index of each output's window maximum.
    MaxPool(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        pred: Var,
        targets: Vec<usize>,
        weights: [f64; 2],
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: [f64; 2],
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Recorded computation. Leaves may borrow their values.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that owns its value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf borrowing `value` without copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = b.len();
        if b.shape().len() != 1 || x.shape().last() != Some(&n) {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match input {:?}", b.shape(), x.shape()),
            ));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let x = self.value(a);
        same_shape("mul_const", x, &c)?;
        let out = zip_map(x, &c, |p, q| p * q);
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row-wise `softmax(q[n,d] k[m,d]^T)`, the `[n, m]` attention weights,
    /// without materialising the score matrix separately.
    pub fn attention_weights(&mut self, q: Var, k: Var) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let (&[n, d], &[m, d2]) = (qv.shape(), kv.shape()) else {
            return Err(Error::dim(
                "attention_weights",
                format!("expected q[n,d] and k[m,d], got {:?} and {:?}", qv.shape(), kv.shape()),
            ));
        };
        if d != d2 {
            return Err(Error::dim(
                "attention_weights",
                format!("query width {d} differs from key width {d2}"),
            ));
        }
        let mut w = vec![0.0; n * m];
        gemm_nt(qv.data(), kv.data(), &mut w, n, d, m);
        for row in w.chunks_mut(m) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new([n, m], w)?, Op::AttentionWeights(q, k)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Stride-1, zero "same" padded convolution of `x[H,W,Din]` with
    /// `kernel[K,K,Din,Dout]` plus `bias[Dout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(out, Op::Conv2d { x, kernel, bias }))
    }

    /// Non-overlapping `p x p` max pooling over `x[H,W,D]`; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn maxpool(&mut self, x: Var, p: usize) -> Result<Var> {
        let (out, argmax) = maxpool_forward(self.value(x), p)?;
        Ok(self.push(out, Op::MaxPool(x, argmax)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Weighted categorical cross-entropy of probabilities `pred[B,2]`.
    pub fn cross_entropy(&mut self, pred: Var, targets: &[usize], weights: [f64; 2]) -> Result<Var> {
        let loss = cross_entropy_value(self.value(pred), targets, weights)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                pred,
                targets: targets.to_vec(),
                weights,
            },
        ))
    }

    /// Weighted cross-entropy of `softmax(logits[B,2])`, computed as
    /// `logsumexp(z) - z_y` so that its gradient never vanishes.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: [f64; 2]) -> Result<Var> {
        let loss = logits_cross_entropy_value(self.value(logits), targets, weights)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
            },
        ))
    }

    /// Back-propagates from the scalar `loss`. Consumes the tape's gradient
    /// state: calling this twice on one tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a fresh tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = vec![0.0; m * k];
                gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                accumulate(&mut grads[a.0], Tensor::new([m, k], da)?);
                accumulate(&mut grads[b.0], Tensor::new([k, n], db)?);
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()?),
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(&mut grads[a.0], zip_map(g, bv, |p, q| p * q));
                accumulate(&mut grads[b.0], zip_map(g, av, |p, q| p * q));
            }
            Op::AddBias(a, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[bias.0], Tensor::new([n], db)?);
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g.map(|v| v * s)),
            Op::MulConst(a, c) => accumulate(&mut grads[a.0], zip_map(g, c, |p, q| p * q)),
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], zip_map(g, x, |p, q| if q > 0.0 { p } else { 0.0 }));
            }
            Op::Tanh(a) => accumulate(&mut grads[a.0], zip_map(g, out, |p, y| p * (1.0 - y * y))),
            Op::Sigmoid(a) => accumulate(&mut grads[a.0], zip_map(g, out, |p, y| p * y * (1.0 - y))),
            Op::Softmax(a) => {
                let n = *out.shape().last().expect("softmax output has an axis");
                let mut dx = vec![0.0; out.len()];
                for ((d, y), gr) in dx.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((di, yi), gi) in d.iter_mut().zip(y).zip(gr) {
                        *di = yi * (gi - dot);
                    }
                }
                accumulate(&mut grads[a.0], Tensor::new(out.shape(), dx)?);
            }
            Op::AttentionWeights(q, k) => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (n, d, m) = (qv.shape()[0], qv.shape()[1], kv.shape()[0]);
                // dS = W * (dW - rowsum(dW * W))
                let mut ds = g.data().to_vec();
                for (row, w) in ds.chunks_mut(m).zip(out.data().chunks(m)) {
                    let dot: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
                    for (r, &wv) in row.iter_mut().zip(w) {
                        *r = wv * (*r - dot);
                    }
                }
                let mut dq = vec![0.0; n * d];
                gemm_nn(&ds, kv.data(), &mut dq, n, m, d);
                let mut dk = vec![0.0; m * d];
                gemm_tn(&ds, qv.data(), &mut dk, m, n, d);
                accumulate(&mut grads[q.0], Tensor::new([n, d], dq)?);
                accumulate(&mut grads[k.0], Tensor::new([m, d], dk)?);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let extent = self.value(*p).shape()[*axis];
                    accumulate(&mut grads[p.0], g.slice_axis(*axis, start..start + extent)?);
                    start += extent;
                }
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g.reshape(self.value(*a).shape())?),
            Op::Conv2d { x, kernel, bias } => {
                let (dx, dk, db) = conv2d_backward(self.value(*x), self.value(*kernel), g);
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[kernel.0], dk);
                accumulate(&mut grads[bias.0], db);
            }
            Op::MaxPool(a, argmax) => {
                let mut dx = Tensor::zeros(self.value(*a).shape());
                let d = dx.data_mut();
                for (&src, gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                accumulate(&mut grads[a.0], Tensor::full(self.value(*a).shape(), gv));
            }
            Op::CrossEntropy {
                pred,
                targets,
                weights,
            } => {
                let p = self.value(*pred);
                let gv = g.item()?;
                let b = targets.len() as f64;
                let mut dp = Tensor::zeros(p.shape());
                let classes = p.shape()[1];
                for (i, &y) in targets.iter().enumerate() {
                    let q = p.data()[i * classes + y];
                    // the clamp is flat below 1e-12
                    if q > PROB_FLOOR {
                        dp.data_mut()[i * classes + y] = -gv * weights[y] / (b * q);
                    }
                }
                accumulate(&mut grads[pred.0], dp);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let z = self.value(*logits);
                let scale = g.item()? / targets.len() as f64;
                let mut dz = z.data().to_vec();
                for (row, &y) in dz.chunks_mut(2).zip(targets) {
                    softmax_in_place(row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale * weights[y]);
                }
                accumulate(&mut grads[logits.0], Tensor::new(z.shape(), dz)?);
            }
        }
        Ok(())
    }
}

pub(crate) const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_targets(op: &'static str, pred: &Tensor, targets: &[usize]) -> Result<()> {
    if pred.shape().len() != 2 || pred.shape()[1] != 2 || pred.shape()[0] != targets.len() {
        return Err(Error::dim(
            op,
            format!("predictions {:?} vs {} targets over 2 classes", pred.shape(), targets.len()),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Input(format!("{op} over an empty batch")));
    }
    if let Some(y) = targets.iter().find(|&&y| y > 1) {
        return Err(Error::Input(format!("target class {y} is not 0 or 1")));
    }
    Ok(())
}

/// `-(1/B) * sum_i weights[y_i] * ln(clamp(pred[i, y_i]))`
pub fn cross_entropy_value(pred: &Tensor, targets: &[usize], weights: [f64; 2]) -> Result<f64> {
    check_targets("cross_entropy", pred, targets)?;
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let q = pred.data()[i * 2 + y].clamp(PROB_FLOOR, 1.0);
        total -= weights[y] * q.ln();
    }
    Ok(total / targets.len() as f64)
}

/// Cross-entropy of `softmax(logits)`: `(1/B) * sum_i weights[y_i] * (logsumexp(z_i) - z_i[y_i])`.
pub fn logits_cross_entropy_value(logits: &Tensor, targets: &[usize], weights: [f64; 2]) -> Result<f64> {
    check_targets("softmax_cross_entropy", logits, targets)?;
    let mut total = 0.0;
    for (z, &y) in logits.data().chunks(2).zip(targets) {
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        total += weights[y] * (lse - z[y]);
    }
    Ok(total / targets.len() as f64)
}

fn conv_dims(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (&[h, w, din], &[k, k2, kin, dout]) = (x.shape(), kernel.shape()) else {
        return Err(Error::dim(
            "conv2d",
            format!(
                "expected x[H,W,D] and kernel[K,K,D,O], got {:?} and {:?}",
                x.shape(),
                kernel.shape()
            ),
        ));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel must be square with odd size, got {:?}", kernel.shape()),
        ));
    }
    if kin != din {
        return Err(Error::dim(
            "conv2d",
            format!("kernel depth {kin} does not match input depth {din}"),
        ));
    }
    if bias.shape() != [dout] {
        return Err(Error::dim(
            "conv2d",
            format!("bias {:?} does not match {dout} output channels", bias.shape()),
        ));
    }
    Ok((h, w, din, k, dout))
}

/// Calls `f(out_pixel, in_pixel, ki, kj)` for every in-bounds kernel tap.
fn for_each_tap(h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let pad = k / 2;
    for i in 0..h {
        for j in 0..w {
            for ki in 0..k {
                let Some(ii) = (i + ki).checked_sub(pad).filter(|&r| r < h) else { continue };
                for kj in 0..k {
                    let Some(jj) = (j + kj).checked_sub(pad).filter(|&c| c < w) else { continue };
                    f(i * w + j, ii * w + jj, ki, kj);
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, din, k, dout) = conv_dims(x, kernel, bias)?;
    let mut out = vec![0.0; h * w * dout];
    for row in out.chunks_mut(dout) {
        row.copy_from_slice(bias.data());
    }
    let (xd, kd) = (x.data(), kernel.data());
    for_each_tap(h, w, k, |o, src, ki, kj| {
        let orow = &mut out[o * dout..(o + 1) * dout];
        for c in 0..din {
            let xv = xd[src * din + c];
            let base = ((ki * k + kj) * din + c) * dout;
            for (ov, kv) in orow.iter_mut().zip(&kd[base..base + dout]) {
                *ov += xv * kv;
            }
        }
    });
    Tensor::new([h, w, dout], out)
}

fn conv2d_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (h, w, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, dout) = (kernel.shape()[0], kernel.shape()[3]);
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; dout];
    for grow in gd.chunks(dout) {
        for (d, v) in db.iter_mut().zip(grow) {
            *d += v;
        }
    }
    for_each_tap(h, w, k, |o, src, ki, kj| {
        let grow = &gd[o * dout..(o + 1) * dout];
        for c in 0..din {
            let base = ((ki * k + kj) * din + c) * dout;
            let krow = &kd[base..base + dout];
            let xv = xd[src * din + c];
            let mut acc = 0.0;
            for ((dkv, kv), gv) in dk[base..base + dout].iter_mut().zip(krow).zip(grow) {
                *dkv += xv * gv;
                acc += kv * gv;
            }
            dx[src * din + c] += acc;
        }
    });
    (
        Tensor::new(x.shape(), dx).expect("shape"),
        Tensor::new(kernel.shape(), dk).expect("shape"),
        Tensor::new([dout], db).expect("shape"),
    )
}

fn maxpool_forward(x: &Tensor, p: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[h, w, d] = x.shape() else {
        return Err(Error::dim(
            "maxpool",
            format!("expected x[H,W,D], got {:?}", x.shape()),
        ));
    };
    if p == 0 || p > h || p > w {
        return Err(Error::dim(
            "maxpool",
            format!("window {p} does not fit a {h}x{w} map"),
        ));
    }
    let (oh, ow) = (h / p, w / p);
    let mut out = Vec::with_capacity(oh * ow * d);
    let mut argmax = Vec::with_capacity(oh * ow * d);
    let xd = x.data();
    for i in 0..oh {
        for j in 0..ow {
            for c in 0..d {
                let mut best = (i * p * w + j * p) * d + c;
                for di in 0..p {
                    for dj in 0..p {
                        let idx = ((i * p + di) * w + j * p + dj) * d + c;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([oh, ow, d], out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks `f`'s tape gradient for `inputs` against central differences.
    fn check_grads(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item().unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();

        let eps = 1e-5;
        for (n, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v);
            for i in 0..inputs[n].len() {
                let mut plus = inputs.to_vec();
                plus[n].data_mut()[i] += eps;
                let mut minus = inputs.to_vec();
                minus[n].data_mut()[i] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {n}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn sum_gives_ones() {
        let w = Tensor::from_fn([2, 3], |i| i as f64);
        let mut tape = Tape::new();
        let v = tape.leaf(w);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v), Tensor::ones([2, 3]));
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new([3], vec![1., 2., 3.]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).data(), &[2., 4., 6.]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones([2]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones([2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones([2]));
        let b = tape.leaf(Tensor::ones([3, 1]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b), Tensor::zeros([3, 1]));
    }

    #[test]
    fn matmul_transpose_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[2, 4]),
            rand_tensor(&mut rng, &[2]),
        ];
        check_grads(&inputs, |t, v| {
            let bt = t.transpose(v[1]).unwrap();
            let m = t.matmul(v[0], bt).unwrap();
            let m = t.add_bias(m, v[2]).unwrap();
            let m = t.tanh(m);
            let sq = t.mul(m, m).unwrap();
            t.sum(sq)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5])];
        let mask = Tensor::new([5], vec![2.0, 0.0, 2.0, 2.0, 0.0]).unwrap();
        check_grads(&inputs, |t, v| {
            let s = t.sigmoid(v[0]);
            let d = t.sub(s, v[1]).unwrap();
            let a = t.add(d, v[0]).unwrap();
            let r = t.relu(a);
            let m = t.mul_const(r, mask.clone()).unwrap();
            let m = t.scale(m, 0.7);
            let p = t.mul(m, v[1]).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn softmax_concat_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 2])];
        let weights = Tensor::from_fn([2, 5], |i| (i as f64 * 0.37).sin());
        check_grads(&inputs, |t, v| {
            let c = t.concat(&[v[0], v[1]], 1).unwrap();
            let s = t.softmax(c).unwrap();
            let r = t.reshape(s, &[10]).unwrap();
            let w = t.leaf(weights.reshape([10]).unwrap());
            let p = t.mul(r, w).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            rand_tensor(&mut rng, &[5, 4, 2]),
            rand_tensor(&mut rng, &[3, 3, 2, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let probe = Tensor::from_fn([2, 2, 3], |i| 1.0 + (i as f64 * 0.91).cos());
        check_grads(&inputs, |t, v| {
            let c = t.conv2d(v[0], v[1], v[2]).unwrap();
            let p = t.maxpool(c, 2).unwrap();
            let w = t.leaf(probe.clone());
            let m = t.mul(p, w).unwrap();
            t.sum(m)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::new([3, 2], vec![0.2, -0.4, 1.1, 0.3, -0.5, 0.9]).unwrap();
        check_grads(&[logits], |t, v| {
            let p = t.softmax(v[0]).unwrap();
            t.cross_entropy(p, &[0, 1, 1], [1.0, 3.0]).unwrap()
        });
    }

    #[test]
    fn attention_weights_match_composition_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = Tensor::from_fn([5, 3], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn([4, 3], |_| rng.gen_range(-1.0..1.0));
        let direct = q.matmul(&k.transpose().unwrap()).unwrap().softmax().unwrap();
        let mut t = Tape::new();
        let (qv, kv) = (t.leaf(q.clone()), t.leaf(k.clone()));
        let w = t.attention_weights(qv, kv).unwrap();
        assert!(t.value(w).max_abs_diff(&direct) < 1e-15);
        let probe = Tensor::from_fn([5, 4], |_| rng.gen_range(-1.0..1.0));
        check_grads(&[q, k], |t, v| {
            let w = t.attention_weights(v[0], v[1]).unwrap();
            let p = t.leaf(probe.clone());
            let m = t.mul(w, p).unwrap();
            t.sum(m)
        });
        let narrow = t.leaf(Tensor::zeros([4, 2]));
        assert!(t.attention_weights(qv, narrow).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let logits = Tensor::new([3, 2], vec![0.2, -0.4, 1.1, 0.3, -0.5, 0.9]).unwrap();
        check_grads(&[logits.clone()], |t, v| t.softmax_cross_entropy(v[0], &[0, 1, 1], [1.0, 3.0]).unwrap());
        // agrees with the composed softmax + cross-entropy
        let p = logits.softmax().unwrap();
        let a = logits_cross_entropy_value(&logits, &[0, 1, 1], [1.0, 3.0]).unwrap();
        let b = cross_entropy_value(&p, &[0, 1, 1], [1.0, 3.0]).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn saturated_logits_keep_a_gradient() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::new([1, 2], vec![60.0, -60.0]).unwrap());
        let loss = t.softmax_cross_entropy(z, &[1], [1.0, 1.0]).unwrap();
        assert!((t.value(loss).item().unwrap() - 120.0).abs() < 1e-9);
        let g = t.backward(loss).unwrap().get(z);
        assert!((g.data()[0] - 1.0).abs() < 1e-12 && (g.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let onehot = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy_value(&onehot, &[1], [1.0, 1.0]).unwrap(), 0.0);

        let half = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        let l = cross_entropy_value(&half, &[0], [1.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let p = Tensor::new([2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let l = cross_entropy_value(&p, &[0, 1], [1.0, 1.0]).unwrap();
        let oracle = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 0.1643).abs() < 1e-4);

        // log(0) is clamped
        let zero = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let l = cross_entropy_value(&zero, &[1], [1.0, 1.0]).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-12);

        assert!(matches!(
            cross_entropy_value(&half, &[2], [1.0, 1.0]),
            Err(Error::Input(_))
        ));
    }
}
