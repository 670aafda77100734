//! Curve embedding ⊕ demographics, classified by gradient-boosted trees.
//!
//! Boosting minimizes log-loss with second-order leaves `-G / (H + λ)` and
//! exact greedy splits. A split sends `x <= threshold` left, where the
//! threshold is the lower of two adjacent distinct training values, so the
//! fitted ensemble depends only on the ordering of each feature.

use crate::error::{Error, Result};
use crate::synthdata::Demographics;
use crate::tensorcore::sigmoid;
use serde::{Deserialize, Serialize};

/// Number of demographic slots appended after the embedding: age, sex, smoking, height.
pub const DEMOGRAPHIC_WIDTH: usize = 4;

/// Which model output is fused with the demographics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    /// Encoder output at the CLS position.
    #[default]
    Cls,
    /// The head's logit.
    Initial,
}

/// Optional z-scoring of the demographic slots, fit on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicScaling {
    pub mean: [f64; DEMOGRAPHIC_WIDTH],
    pub sd: [f64; DEMOGRAPHIC_WIDTH],
}

impl DemographicScaling {
    pub fn fit(rows: &[Demographics]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Degenerate("no demographics to fit scaling on".to_string()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; DEMOGRAPHIC_WIDTH];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.as_features()) {
                *m += v / n;
            }
        }
        let mut sd = [0.0; DEMOGRAPHIC_WIDTH];
        for r in rows {
            for ((s, v), m) in sd.iter_mut().zip(r.as_features()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
        Ok(DemographicScaling { mean, sd })
    }
}

/// `embedding ⊕ [age, sex, smoking, height]`, demographics raw unless `scaling` is given.
pub fn fuse_features(
    embedding: &[f64],
    expected_len: usize,
    demo: &Demographics,
    scaling: Option<&DemographicScaling>,
) -> Result<Vec<f64>> {
    if embedding.len() != expected_len {
        return Err(Error::Shape(format!(
            "embedding has length {}, expected {expected_len}",
            embedding.len()
        )));
    }
    let mut out = Vec::with_capacity(expected_len + DEMOGRAPHIC_WIDTH);
    out.extend_from_slice(embedding);
    let raw = demo.as_features();
    match scaling {
        None => out.extend_from_slice(&raw),
        Some(s) => out.extend(
            raw.iter()
                .zip(&s.mean)
                .zip(&s.sd)
                .map(|((v, m), sd)| (v - m) / sd),
        ),
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Minimum hessian sum on each side of a split.
    pub min_child_weight: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            rounds: 200,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn features_used(&self, out: &mut Vec<usize>) {
        if let TreeNode::Split {
            feature,
            left,
            right,
            ..
        } = self
        {
            out.push(*feature);
            left.features_used(out);
            right.features_used(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtEnsemble {
    pub n_features: usize,
    /// Log-odds offset, the logit of the training prevalence.
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<TreeNode>,
}

impl GbdtEnsemble {
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Shape(format!(
                "ensemble expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(self.base_score + self.learning_rate * self.trees.iter().map(|t| t.eval(x)).sum::<f64>())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.margin(x)?))
    }

    /// Sorted, de-duplicated indices of features that appear in any split.
    pub fn features_used(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for t in &self.trees {
            t.features_used(&mut out);
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: GbdtEnsemble = serde_json::from_str(text)?;
        let finite = |t: &TreeNode| -> bool {
            fn walk(t: &TreeNode) -> bool {
                match t {
                    TreeNode::Leaf { value } => value.is_finite(),
                    TreeNode::Split {
                        threshold,
                        left,
                        right,
                        ..
                    } => !threshold.is_nan() && walk(left) && walk(right),
                }
            }
            walk(t)
        };
        if !e.base_score.is_finite() || !e.trees.iter().all(finite) {
            return Err(Error::Schema("ensemble contains non-finite values".to_string()));
        }
        Ok(e)
    }
}

pub fn log_loss(probs: &[f64], labels: &[u8]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / probs.len() as f64
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    sorted: &'a [Vec<usize>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
}

impl Grower<'_> {
    fn leaf(&self, g: f64, h: f64) -> TreeNode {
        TreeNode::Leaf {
            value: -g / (h + self.params.lambda),
        }
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    /// `members[i]` marks examples that reach this node.
    fn grow(&self, members: &[bool], depth: usize) -> TreeNode {
        let (mut g, mut h) = (0.0, 0.0);
        for (i, _) in members.iter().enumerate().filter(|(_, m)| **m) {
            g += self.grad[i];
            h += self.hess[i];
        }
        if depth >= self.params.max_depth {
            return self.leaf(g, h);
        }
        let parent = self.score(g, h);
        let mut best: Option<Candidate> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            let mut prev: Option<f64> = None;
            for &i in order {
                if !members[i] {
                    continue;
                }
                let v = self.x[i][f];
                if let Some(p) = prev {
                    if v != p {
                        let (gr, hr) = (g - gl, h - hl);
                        let mcw = self.params.min_child_weight;
                        if hl >= mcw && hr >= mcw {
                            let gain = self.score(gl, hl) + self.score(gr, hr) - parent;
                            if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                                best = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold: p,
                                });
                            }
                        }
                    }
                }
                gl += self.grad[i];
                hl += self.hess[i];
                prev = Some(v);
            }
        }
        let Some(best) = best else {
            return self.leaf(g, h);
        };
        let mut left = vec![false; members.len()];
        let mut right = vec![false; members.len()];
        for (i, _) in members.iter().enumerate().filter(|(_, m)| **m) {
            if self.x[i][best.feature] <= best.threshold {
                left[i] = true;
            } else {
                right[i] = true;
            }
        }
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.grow(&left, depth + 1)),
            right: Box::new(self.grow(&right, depth + 1)),
        }
    }
}

/// Stagewise log-loss boosting. Returns the ensemble and the training loss after each round.
pub fn gbdt_train_with_history(
    x: &[Vec<f64>],
    y: &[u8],
    params: &GbdtParams,
) -> Result<(GbdtEnsemble, Vec<f64>)> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::Shape(format!(
            "gbdt needs >= 2 rows with one label each, got {} rows and {} labels",
            x.len(),
            y.len()
        )));
    }
    if params.lambda < 0.0 || params.learning_rate <= 0.0 {
        return Err(Error::Config("gbdt lambda must be >= 0 and learning rate > 0".to_string()));
    }
    let n_features = x[0].len();
    if let Some(bad) = x.iter().position(|r| r.len() != n_features) {
        return Err(Error::Shape(format!(
            "row {bad} has {} features, expected {n_features}",
            x[bad].len()
        )));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gbdt features".to_string()));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Degenerate("gbdt labels contain a single class".to_string()));
    }
    let prevalence = pos as f64 / y.len() as f64;
    let base_score = (prevalence / (1.0 - prevalence)).ln();
    let sorted: Vec<Vec<usize>> = (0..n_features)
        .map(|f| {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut margin = vec![base_score; x.len()];
    let mut ensemble = GbdtEnsemble {
        n_features,
        base_score,
        learning_rate: params.learning_rate,
        trees: Vec::with_capacity(params.rounds),
    };
    let all = vec![true; x.len()];
    let mut history = Vec::with_capacity(params.rounds);
    for _ in 0..params.rounds {
        let p: Vec<f64> = margin.iter().map(|&m| sigmoid(m)).collect();
        let grad: Vec<f64> = p.iter().zip(y).map(|(p, &t)| p - f64::from(t)).collect();
        let hess: Vec<f64> = p.iter().map(|p| (p * (1.0 - p)).max(1e-16)).collect();
        let tree = Grower {
            x,
            sorted: &sorted,
            grad: &grad,
            hess: &hess,
            params,
        }
        .grow(&all, 0);
        for (m, row) in margin.iter_mut().zip(x) {
            *m += params.learning_rate * tree.eval(row);
        }
        ensemble.trees.push(tree);
        let probs: Vec<f64> = margin.iter().map(|&m| sigmoid(m)).collect();
        history.push(log_loss(&probs, y));
    }
    Ok((ensemble, history))
}

pub fn gbdt_train(x: &[Vec<f64>], y: &[u8], params: &GbdtParams) -> Result<GbdtEnsemble> {
    Ok(gbdt_train_with_history(x, y, params)?.0)
}
