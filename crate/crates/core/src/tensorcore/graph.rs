//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; `backward` walks it once from the end.

use super::tensor::{dot, matmul_nn_acc, matmul_nt, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    ConcatRows(Var, Var),
    SliceRows {
        src: Var,
        start: usize,
    },
    Gelu(Var),
    MulConst {
        src: Var,
        factor: Tensor,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Tensor,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation and its gradient tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Input whose gradient is wanted (parameters, or inputs under a gradient check).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` if no path reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Attention probabilities `[heads, L, L]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `x[..., in] · Wᵀ + b` with `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out_dim] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} incompatible with weight {:?}",
                    bv.shape(),
                    wv.shape()
                )));
            }
        }
        let m = xv.rows();
        let mut data = matmul_nt(xv.data(), m, in_dim, wv.data(), out_dim);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(out_dim) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = out_dim;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Stack two row blocks `[r1, d]` and `[r2, d]` into `[r1 + r2, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.last_dim() != bv.last_dim() {
            return Err(Error::Shape(format!(
                "concat_rows: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let d = av.last_dim();
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let rows = av.rows() + bv.rows();
        let value = Tensor::new(vec![rows, d], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    /// Rows `start..start + len` of a `[R, d]` tensor.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        if start + len > sv.rows() {
            return Err(Error::Shape(format!(
                "slice_rows: rows {}..{} out of range for {:?}",
                start,
                start + len,
                sv.shape()
            )));
        }
        let d = sv.last_dim();
        let data = sv.data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], data)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::SliceRows { src, start }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same length");
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Element-wise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, src: Var, factor: Tensor) -> Result<Var> {
        let sv = self.value(src);
        if !sv.same_shape(&factor) {
            return Err(Error::Shape(format!(
                "mul_const: {:?} vs {:?}",
                sv.shape(),
                factor.shape()
            )));
        }
        let data = sv
            .data()
            .iter()
            .zip(factor.data())
            .map(|(a, f)| a * f)
            .collect();
        let value = Tensor::new(sv.shape().to_vec(), data)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::MulConst { src, factor }, rg))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 || self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let rows = xv.rows();
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in normalized[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = normalized.clone();
        for row in data.chunks_mut(d) {
            for ((o, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `[L, d]` inputs.
    ///
    /// `key_mask[j] == true` marks key `j` as padding: it gets `-inf` before the
    /// softmax and exactly zero probability after it.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape().len() != 2 || !qv.same_shape(kv) || !qv.same_shape(vv) {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?} must all be [L, d]",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (l, d) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: model dim {d} not divisible by {heads} heads"
            )));
        }
        if key_mask.len() != l {
            return Err(Error::Shape(format!(
                "attention: mask length {} vs sequence length {l}",
                key_mask.len()
            )));
        }
        if key_mask.iter().all(|&m| m) {
            return Err(Error::Degenerate(
                "attention: every key is masked".to_string(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &qd[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    if key_mask[j] {
                        prow[j] = f64::NEG_INFINITY;
                    } else {
                        let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = 0.0;
                for p in prow.iter_mut() {
                    // exp(-inf) is exactly zero
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for p in prow.iter_mut() {
                    *p /= sum;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..l {
                    let pj = prow[j];
                    if pj == 0.0 {
                        continue;
                    }
                    for (o, x) in orow.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                        *o += pj * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![l, d], out)?;
        let probs = Tensor::new(vec![heads, l, l], probs)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 (or soft) targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                lv.len(),
                targets.len()
            )));
        }
        let n = targets.len() as f64;
        let loss = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[label]` for a single `[C]` logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.len();
        if c < 2 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: need at least 2 classes, got {c}"
            )));
        }
        if label >= c {
            return Err(Error::Param(format!(
                "softmax_cross_entropy: label {label} out of range for {c} classes"
            )));
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lv.data().iter().map(|z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        let probs: Vec<f64> = lv.data().iter().map(|z| (z - max).exp() / sum).collect();
        let loss = -(lv.data()[label] - max - log_sum);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, target: Var, delta: Tensor) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    /// Back-propagate from the scalar `output`, accumulating gradients into every
    /// node that requires them. Each node is visited once, in reverse tape order.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward: output must be scalar, got {:?}",
                self.value(output).shape()
            )));
        }
        let shape = self.value(output).shape().to_vec();
        self.nodes[output.0].grad = Some(Tensor::filled(&shape, 1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor) -> Result<()> {
        let mut updates: Vec<(Var, Tensor)> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.value(x);
                let wv = self.value(w);
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.rows();
                if self.rg(x) {
                    let mut dx = vec![0.0; m * in_dim];
                    matmul_nn_acc(grad.data(), m, out_dim, wv.data(), in_dim, &mut dx);
                    updates.push((x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    matmul_tn_acc(grad.data(), m, out_dim, xv.data(), in_dim, &mut dw);
                    updates.push((w, Tensor::new(wv.shape().to_vec(), dw)?));
                }
                if let Some(b) = b {
                    if self.rg(b) {
                        let mut db = vec![0.0; out_dim];
                        for row in grad.data().chunks(out_dim) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        updates.push((b, Tensor::vector(db)));
                    }
                }
            }
            Op::Add(a, b) => {
                updates.push((*a, grad.clone()));
                updates.push((*b, grad.clone()));
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let split = self.value(a).len();
                let ta = Tensor::new(
                    self.value(a).shape().to_vec(),
                    grad.data()[..split].to_vec(),
                )?;
                let tb = Tensor::new(
                    self.value(b).shape().to_vec(),
                    grad.data()[split..].to_vec(),
                )?;
                updates.push((a, ta));
                updates.push((b, tb));
            }
            Op::SliceRows { src, start } => {
                let src = *src;
                let sv = self.value(src);
                let d = sv.last_dim();
                let mut full = Tensor::zeros(sv.shape());
                full.data_mut()[start * d..start * d + grad.len()].copy_from_slice(grad.data());
                updates.push((src, full));
            }
            Op::Gelu(a) => {
                let a = *a;
                let av = self.value(a);
                let data = av
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, g)| g * gelu_grad(x))
                    .collect();
                updates.push((a, Tensor::new(av.shape().to_vec(), data)?));
            }
            Op::MulConst { src, factor } => {
                let data = grad
                    .data()
                    .iter()
                    .zip(factor.data())
                    .map(|(g, f)| g * f)
                    .collect();
                updates.push((*src, Tensor::new(grad.shape().to_vec(), data)?));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = grad.last_dim();
                let g = self.value(gain).data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; grad.len()];
                for (r, (grow, nrow)) in grad
                    .data()
                    .chunks(d)
                    .zip(normalized.chunks(d))
                    .enumerate()
                {
                    let mut sum_dn = 0.0;
                    let mut sum_dn_n = 0.0;
                    for i in 0..d {
                        dgain[i] += grow[i] * nrow[i];
                        dbias[i] += grow[i];
                        let dn = grow[i] * g[i];
                        sum_dn += dn;
                        sum_dn_n += dn * nrow[i];
                    }
                    let is = inv_std[r] / d as f64;
                    for i in 0..d {
                        let dn = grow[i] * g[i];
                        dx[r * d + i] = is * (d as f64 * dn - sum_dn - nrow[i] * sum_dn_n);
                    }
                }
                updates.push((x, Tensor::new(grad.shape().to_vec(), dx)?));
                updates.push((gain, Tensor::vector(dgain)));
                updates.push((bias, Tensor::vector(dbias)));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let (l, d) = (qv.shape()[0], qv.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd, gd, pd) =
                    (qv.data(), kv.data(), vv.data(), grad.data(), probs.data());
                let mut dq = vec![0.0; l * d];
                let mut dk = vec![0.0; l * d];
                let mut dv = vec![0.0; l * d];
                let mut dp = vec![0.0; l];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..l {
                        let prow = &pd[(h * l + i) * l..(h * l + i + 1) * l];
                        let gi = &gd[i * d + off..i * d + off + dh];
                        // dP[i, j] = dO[i] · V[j]; dV[j] += P[i, j] dO[i]
                        let mut weighted = 0.0;
                        for j in 0..l {
                            let pj = prow[j];
                            if pj == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            weighted += pj * dp[j];
                            for (o, g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                *o += pj * g;
                            }
                        }
                        // dS = P ⊙ (dP - Σ P dP), scaled into dQ and dK
                        for j in 0..l {
                            let pj = prow[j];
                            if pj == 0.0 {
                                continue;
                            }
                            let ds = pj * (dp[j] - weighted) * scale;
                            for t in 0..dh {
                                dq[i * d + off + t] += ds * kd[j * d + off + t];
                                dk[j * d + off + t] += ds * qd[i * d + off + t];
                            }
                        }
                    }
                }
                updates.push((q, Tensor::new(vec![l, d], dq)?));
                updates.push((k, Tensor::new(vec![l, d], dk)?));
                updates.push((v, Tensor::new(vec![l, d], dv)?));
            }
            Op::BceWithLogits { logits, targets } => {
                let logits = *logits;
                let lv = self.value(logits);
                let n = targets.len() as f64;
                let g0 = grad.data()[0];
                let data = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g0 * (sigmoid(z) - y) / n)
                    .collect();
                updates.push((logits, Tensor::new(lv.shape().to_vec(), data)?));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let g0 = grad.data()[0];
                let mut data: Vec<f64> = probs.iter().map(|p| g0 * p).collect();
                data[*label] -= g0;
                let shape = self.value(*logits).shape().to_vec();
                updates.push((*logits, Tensor::new(shape, data)?));
            }
        }
        for (target, delta) in updates {
            self.accumulate(target, delta);
        }
        Ok(())
    }
}
