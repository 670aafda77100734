//! Patch transformer over flow-volume curves.
//!
//! Row 0 of the token sequence is a learned CLS vector; rows 1..=N are linear
//! projections of the patches. Learned positional rows are added, the sequence
//! runs through post-LN encoder layers with key padding masks, and the CLS
//! output feeds a two-layer MLP producing one logit.

use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::preproc::PatchSequence;
use crate::synthdata::derive_seed;
use crate::tensorcore::{sigmoid, AdamState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const STREAM_INIT: u64 = 101;
const STREAM_SPLIT: u64 = 102;
const STREAM_SHUFFLE: u64 = 103;
const STREAM_DROPOUT: u64 = 104;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_len: usize,
    pub d_embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_len: 30,
            d_embed: 200,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            head_hidden: 64,
            dropout: 0.1,
            lr: 1e-5,
            epochs: 30,
            batch_size: 64,
            split: [0.8, 0.1, 0.1],
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Smaller, faster settings that train in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            d_embed: 32,
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_len == 0 || self.d_embed == 0 || self.layers == 0 || self.heads == 0 {
            return bad("patch_len, d_embed, layers and heads must be positive".into());
        }
        if !self.d_embed.is_multiple_of(self.heads) {
            return bad(format!(
                "d_embed {} not divisible by {} heads",
                self.d_embed, self.heads
            ));
        }
        if self.ffn_mult == 0 || self.head_hidden == 0 || self.batch_size == 0 {
            return bad("ffn_mult, head_hidden and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| *f <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("split {:?} must be positive and sum to 1", self.split));
        }
        Ok(())
    }
}

/// Weights of one encoder layer, generic so the same layout can hold tensors or graph handles.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOf<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ff1_w: T,
    pub ff1_b: T,
    pub ff2_w: T,
    pub ff2_b: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

const LAYER_NAMES: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "ff1_w", "ff1_b",
    "ff2_w", "ff2_b", "ln2_gain", "ln2_bias",
];

impl<T> LayerOf<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gain, &self.ln1_bias, &self.ff1_w, &self.ff1_b, &self.ff2_w, &self.ff2_b,
            &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gain, &mut self.ln1_bias, &mut self.ff1_w,
            &mut self.ff1_b, &mut self.ff2_w, &mut self.ff2_b, &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    fn from_array(a: [T; 16]) -> Self {
        let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, ff1_w, ff1_b, ff2_w, ff2_b, ln2_gain, ln2_bias] =
            a;
        LayerOf {
            wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, ff1_w, ff1_b, ff2_w, ff2_b,
            ln2_gain, ln2_bias,
        }
    }
}

/// All learnable tensors (or their graph handles) in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsOf<T> {
    pub w_proj: T,
    pub b_proj: T,
    pub cls: T,
    pub pos: T,
    pub layers: Vec<LayerOf<T>>,
    pub head1_w: T,
    pub head1_b: T,
    pub head2_w: T,
    pub head2_b: T,
}

impl<T> WeightsOf<T> {
    /// `(name, value)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("w_proj".to_string(), &self.w_proj),
            ("b_proj".to_string(), &self.b_proj),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.refs()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("head1_w".to_string(), &self.head1_w));
        out.push(("head1_b".to_string(), &self.head1_b));
        out.push(("head2_w".to_string(), &self.head2_w));
        out.push(("head2_b".to_string(), &self.head2_b));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.w_proj, &mut self.b_proj, &mut self.cls, &mut self.pos];
        for layer in &mut self.layers {
            out.extend(layer.refs_mut());
        }
        out.extend([
            &mut self.head1_w,
            &mut self.head1_b,
            &mut self.head2_w,
            &mut self.head2_b,
        ]);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> WeightsOf<U> {
        WeightsOf {
            w_proj: f(&self.w_proj),
            b_proj: f(&self.b_proj),
            cls: f(&self.cls),
            pos: f(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerOf::from_array(l.refs().map(&mut f)))
                .collect(),
            head1_w: f(&self.head1_w),
            head1_b: f(&self.head1_b),
            head2_w: f(&self.head2_w),
            head2_b: f(&self.head2_b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub heads: usize,
    pub weights: WeightsOf<Tensor>,
}

fn xavier(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor {
    let limit = (6.0 / (out + inp) as f64).sqrt();
    let data = (0..out * inp).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![out, inp], data).expect("shape matches data")
}

fn small_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, 0.02).expect("valid sd");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches data")
}

impl ModelParams {
    /// Fresh weights for sequences of up to `max_patches` patches.
    pub fn init(cfg: &ModelConfig, max_patches: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, STREAM_INIT));
        let (d, p, f, h) = (
            cfg.d_embed,
            cfg.patch_len,
            cfg.d_embed * cfg.ffn_mult,
            cfg.head_hidden,
        );
        let w_proj = xavier(&mut rng, d, p);
        let cls = small_normal(&mut rng, &[1, d]);
        let pos = small_normal(&mut rng, &[max_patches + 1, d]);
        let layers = (0..cfg.layers)
            .map(|_| LayerOf {
                wq: xavier(&mut rng, d, d),
                bq: Tensor::zeros(&[d]),
                wk: xavier(&mut rng, d, d),
                bk: Tensor::zeros(&[d]),
                wv: xavier(&mut rng, d, d),
                bv: Tensor::zeros(&[d]),
                wo: xavier(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ff1_w: xavier(&mut rng, f, d),
                ff1_b: Tensor::zeros(&[f]),
                ff2_w: xavier(&mut rng, d, f),
                ff2_b: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let weights = WeightsOf {
            w_proj,
            b_proj: Tensor::zeros(&[d]),
            cls,
            pos,
            layers,
            head1_w: xavier(&mut rng, h, d),
            head1_b: Tensor::zeros(&[h]),
            head2_w: xavier(&mut rng, 1, h),
            head2_b: Tensor::zeros(&[1]),
        };
        Ok(ModelParams {
            heads: cfg.heads,
            weights,
        })
    }

    pub fn d_embed(&self) -> usize {
        self.weights.cls.len()
    }

    pub fn patch_len(&self) -> usize {
        self.weights.w_proj.shape()[1]
    }

    /// Longest sequence (in patches) the positional table covers.
    pub fn max_patches(&self) -> usize {
        self.weights.pos.shape()[0] - 1
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }
}

struct Dropout {
    rng: ChaCha8Rng,
    p: f64,
}

impl Dropout {
    fn apply(&mut self, g: &mut Graph, v: Var) -> Result<Var> {
        if self.p == 0.0 {
            return Ok(v);
        }
        let shape = g.value(v).shape().to_vec();
        let keep = 1.0 / (1.0 - self.p);
        let n = g.value(v).len();
        let factor: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        g.mul_const(v, Tensor::new(shape, factor)?)
    }
}

struct Built {
    tokens: Var,
    h: Var,
    cls: Var,
    hidden: Var,
    logit: Var,
    attention: Vec<Var>,
}

fn check_input(w: &WeightsOf<Tensor>, seq: &PatchSequence) -> Result<()> {
    let (p, max) = (w.w_proj.shape()[1], w.pos.shape()[0] - 1);
    if seq.patch_len != p {
        return Err(Error::Shape(format!(
            "patch length {} does not match model patch length {p}",
            seq.patch_len
        )));
    }
    if seq.n_patches > max {
        return Err(Error::Shape(format!(
            "{} patches exceed the {max} positional rows of the model",
            seq.n_patches
        )));
    }
    if seq.mask.len() != seq.n_patches + 1 || seq.mask[0] {
        return Err(Error::Shape(format!(
            "mask of length {} invalid for {} patches",
            seq.mask.len(),
            seq.n_patches
        )));
    }
    Ok(())
}

fn build(
    g: &mut Graph,
    w: &WeightsOf<Var>,
    seq: &PatchSequence,
    heads: usize,
    mut dropout: Option<&mut Dropout>,
) -> Result<Built> {
    let n = seq.n_patches;
    let x = g.constant(Tensor::matrix(n, seq.patch_len, seq.patches.clone())?);
    let z = g.linear(x, w.w_proj, Some(w.b_proj))?;
    let with_cls = g.concat_rows(w.cls, z)?;
    let pos = g.slice_rows(w.pos, 0, n + 1)?;
    let tokens = g.add(with_cls, pos)?;
    let mut h = tokens;
    let mut attention = Vec::with_capacity(w.layers.len());
    for (i, l) in w.layers.iter().enumerate() {
        let q = g.linear(h, l.wq, Some(l.bq))?;
        let k = g.linear(h, l.wk, Some(l.bk))?;
        let v = g.linear(h, l.wv, Some(l.bv))?;
        let a = g.attention(q, k, v, &seq.mask, heads)?;
        attention.push(a);
        let mut o = g.linear(a, l.wo, Some(l.bo))?;
        if let Some(d) = dropout.as_deref_mut() {
            o = d.apply(g, o)?;
        }
        let r = g.add(h, o)?;
        h = g.layer_norm(r, l.ln1_gain, l.ln1_bias, LN_EPS)?;
        let f = g.linear(h, l.ff1_w, Some(l.ff1_b))?;
        let f = g.gelu(f);
        let mut f = g.linear(f, l.ff2_w, Some(l.ff2_b))?;
        if let Some(d) = dropout.as_deref_mut() {
            f = d.apply(g, f)?;
        }
        let r = g.add(h, f)?;
        h = g.layer_norm(r, l.ln2_gain, l.ln2_bias, LN_EPS)?;
        g.value(h)
            .check_finite(&format!("encoder layer {i}"))?;
    }
    let cls = g.slice_rows(h, 0, 1)?;
    let u = g.linear(cls, w.head1_w, Some(w.head1_b))?;
    let hidden = g.gelu(u);
    let logit = g.linear(hidden, w.head2_w, Some(w.head2_b))?;
    g.value(logit).check_finite("head logit")?;
    Ok(Built {
        tokens,
        h,
        cls,
        hidden,
        logit,
        attention,
    })
}

/// Everything recorded by an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Encoder output `[N + 1, d_embed]`.
    pub h: Tensor,
    pub cls_embedding: Vec<f64>,
    /// Post-activation hidden layer of the head.
    pub head_hidden: Vec<f64>,
    pub logit: f64,
    /// Per layer, `[heads, N + 1, N + 1]`.
    pub attention: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn probability(&self) -> f64 {
        sigmoid(self.logit)
    }
}

/// Token matrix after patch projection, CLS and positional rows: `[N + 1, d_embed]`.
pub fn embed_patches(params: &ModelParams, seq: &PatchSequence) -> Result<Tensor> {
    check_input(&params.weights, seq)?;
    let mut g = Graph::new();
    let w = params.weights.map(|t| g.constant(t.clone()));
    let b = build(&mut g, &w, seq, params.heads, None)?;
    Ok(g.value(b.tokens).clone())
}

/// Inference pass with dropout disabled.
pub fn forward(params: &ModelParams, seq: &PatchSequence) -> Result<ForwardTrace> {
    check_input(&params.weights, seq)?;
    let mut g = Graph::new();
    let w = params.weights.map(|t| g.constant(t.clone()));
    let b = build(&mut g, &w, seq, params.heads, None)?;
    Ok(ForwardTrace {
        h: g.value(b.h).clone(),
        cls_embedding: g.value(b.cls).data().to_vec(),
        head_hidden: g.value(b.hidden).data().to_vec(),
        logit: g.value(b.logit).data()[0],
        attention: b
            .attention
            .iter()
            .map(|a| g.attention_weights(*a).expect("attention node").clone())
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub logit: f64,
    pub cls_embedding: Vec<f64>,
}

pub fn predict(params: &ModelParams, seq: &PatchSequence) -> Result<Prediction> {
    let t = forward(params, seq)?;
    Ok(Prediction {
        probability: t.probability(),
        logit: t.logit,
        cls_embedding: t.cls_embedding,
    })
}

/// Parallel over examples; output order matches input order.
pub fn predict_batch(params: &ModelParams, seqs: &[&PatchSequence]) -> Result<Vec<Prediction>> {
    seqs.par_iter().map(|s| predict(params, s)).collect()
}

/// Binary cross-entropy of one example with dropout disabled.
pub fn example_loss(params: &ModelParams, seq: &PatchSequence, label: u8) -> Result<f64> {
    let logit = forward(params, seq)?.logit;
    let y = f64::from(label);
    Ok(logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p())
}

/// Loss and parameter gradients (canonical order) for one example.
pub fn example_gradient(
    params: &ModelParams,
    seq: &PatchSequence,
    label: u8,
    dropout: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    check_input(&params.weights, seq)?;
    let mut g = Graph::new();
    let w = params.weights.map(|t| g.leaf(t.clone()));
    let mut drop = Dropout {
        rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        p: dropout,
    };
    let b = build(&mut g, &w, seq, params.heads, Some(&mut drop))?;
    let loss = g.bce_with_logits(b.logit, &[f64::from(label)])?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    let grads = w
        .named()
        .into_iter()
        .map(|(_, v)| {
            g.take_grad(*v)
                .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()))
        })
        .collect();
    Ok((value, grads))
}

/// Mean loss and summed-then-averaged gradients over a batch.
///
/// Examples run in parallel; gradients are combined in input order so the
/// result does not depend on thread scheduling.
pub fn batch_gradient(
    params: &ModelParams,
    seqs: &[&PatchSequence],
    labels: &[u8],
    dropout: f64,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    if seqs.is_empty() || seqs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "batch of {} inputs and {} labels",
            seqs.len(),
            labels.len()
        )));
    }
    let per: Vec<(f64, Vec<Tensor>)> = seqs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (s, &y))| {
            example_gradient(params, s, y, dropout, derive_seed(seed, i as u64, STREAM_DROPOUT))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, gs) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(&gs) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grads))
}

/// One Adam update; parameters are untouched if any gradient is non-finite.
pub fn apply_gradient(
    params: &mut ModelParams,
    adam: &mut AdamState,
    grads: &[Tensor],
    lr: f64,
) -> Result<()> {
    let mut values = params.weights.values_mut();
    adam.step(&mut values, grads, lr)
}

pub fn new_optimizer(params: &ModelParams) -> AdamState {
    AdamState::new(params.weights.named().into_iter().map(|(_, t)| t))
}

/// Deterministic train / validation / test partition of `0..n`.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, STREAM_SPLIT));
    idx.shuffle(&mut rng);
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = (n as f64 * fractions[1]).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split {fractions:?} of {n} examples leaves an empty partition"
        )));
    }
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok([idx, val, test])
}

/// Inputs paired with binary labels.
#[derive(Debug, Clone, Copy)]
pub struct Examples<'a> {
    pub inputs: &'a [&'a PatchSequence],
    pub labels: &'a [u8],
}

impl Examples<'_> {
    fn check(&self, what: &str) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Config(format!("{what} split is empty")));
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{what}: {} inputs vs {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_auc: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Mean BCE and ROC-AUC with dropout disabled.
pub fn evaluate(params: &ModelParams, data: Examples<'_>) -> Result<(f64, f64)> {
    let preds = predict_batch(params, data.inputs)?;
    let loss = preds
        .iter()
        .zip(data.labels)
        .map(|(p, &y)| {
            let z = p.logit;
            z.max(0.0) - z * f64::from(y) + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / preds.len() as f64;
    let scores: Vec<f64> = preds.iter().map(|p| p.logit).collect();
    Ok((loss, roc_auc(&scores, data.labels)?))
}

/// Adam training with seeded shuffling and dropout; keeps the best validation-AUC epoch.
pub fn train(
    cfg: &ModelConfig,
    train_set: Examples<'_>,
    val_set: Examples<'_>,
) -> Result<(ModelParams, History)> {
    cfg.validate()?;
    train_set.check("training")?;
    val_set.check("validation")?;
    let max_patches = train_set
        .inputs
        .iter()
        .chain(val_set.inputs)
        .map(|s| s.n_patches)
        .max()
        .unwrap_or(0);
    let mut params = ModelParams::init(cfg, max_patches)?;
    let mut adam = new_optimizer(&params);
    let mut history = History {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_auc: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train_set.inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, STREAM_SHUFFLE));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&PatchSequence> = chunk.iter().map(|&i| train_set.inputs[i]).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let step_seed = derive_seed(cfg.seed, (epoch * 1_000_003 + b) as u64, STREAM_DROPOUT);
            let (_, grads) = batch_gradient(&params, &seqs, &labels, cfg.dropout, step_seed)?;
            apply_gradient(&mut params, &mut adam, &grads, cfg.lr)?;
        }
        let (train_loss, _) = evaluate(&params, train_set)?;
        let (val_loss, val_auc) = evaluate(&params, val_set)?;
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_auc.push(val_auc);
        if best.as_ref().is_none_or(|(a, _)| val_auc > *a) {
            history.best_epoch = epoch;
            best = Some((val_auc, params.clone()));
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preproc::{patchify, FlowVolumeCurve};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            patch_len: 30,
            d_embed: 8,
            layers: 1,
            heads: 2,
            head_hidden: 6,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn seq(values: &[f64], t: usize) -> PatchSequence {
        let mut flow = values.to_vec();
        flow.resize(t, 0.0);
        let curve = FlowVolumeCurve {
            flow_lps: flow,
            valid_len: values.len(),
            dv_l: 0.01,
        };
        patchify(&curve, 30).unwrap()
    }

    #[test]
    fn zeroed_projection_embeds_cls_only() {
        let mut p = ModelParams::init(&tiny_cfg(), 3).unwrap();
        for t in [&mut p.weights.w_proj, &mut p.weights.b_proj, &mut p.weights.pos] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let s = seq(&[1.0; 45], 90);
        let e = embed_patches(&p, &s).unwrap();
        assert_eq!(e.row(0), p.weights.cls.data());
        assert!(e.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_matches_direct_matmul() {
        let p = ModelParams::init(&tiny_cfg(), 3).unwrap();
        let vals: Vec<f64> = (0..70).map(|i| (i as f64 * 0.3).cos()).collect();
        let s = seq(&vals, 90);
        let e = embed_patches(&p, &s).unwrap();
        let w = &p.weights;
        for i in 0..3 {
            for o in 0..8 {
                let mut acc = w.b_proj.data()[o] + w.pos.row(i + 1)[o];
                for k in 0..30 {
                    acc += w.w_proj.row(o)[k] * s.patch(i)[k];
                }
                assert!((e.row(i + 1)[o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_patches_is_a_shape_error() {
        let p = ModelParams::init(&tiny_cfg(), 2).unwrap();
        assert!(matches!(forward(&p, &seq(&[1.0; 10], 90)), Err(Error::Shape(_))));
    }

    #[test]
    fn split_partitions_everything_once() {
        let [a, b, c] = split_indices(103, [0.8, 0.1, 0.1], 4).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!((a.len(), b.len()), (82, 10));
        assert_eq!(split_indices(103, [0.8, 0.1, 0.1], 4).unwrap()[1], b);
        assert!(split_indices(5, [0.8, 0.1, 0.1], 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d_embed: 9,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
