//! Non-transformer comparison methods: FEV1/FVC ratio score and two small MLPs.

use crate::dataset::RecordMeta;
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::preproc::SpiroSummary;
use crate::synthdata::derive_seed;
use crate::tensorcore::{sigmoid, AdamState, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const STREAM_INIT: u64 = 201;
const STREAM_SHUFFLE: u64 = 202;

/// Higher means more obstructed: `1 - FEV1/FVC`.
pub fn ratio_score(summary: &SpiroSummary) -> Result<f64> {
    if !(summary.fvc_l > 0.0) || !summary.ratio.is_finite() {
        return Err(Error::Degenerate(format!(
            "ratio undefined for FVC {} and ratio {}",
            summary.fvc_l, summary.ratio
        )));
    }
    Ok(1.0 - summary.ratio)
}

/// `p = sigmoid(a·score + b)`, fit by Newton's method on training scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattScaling {
    pub a: f64,
    pub b: f64,
}

impl PlattScaling {
    pub fn fit(scores: &[f64], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::Shape("calibration needs one label per score".to_string()));
        }
        let pos = labels.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::Degenerate("calibration labels hold one class".to_string()));
        }
        let prior = pos as f64 / labels.len() as f64;
        let (mut a, mut b) = (0.0, (prior / (1.0 - prior)).ln());
        for _ in 0..100 {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-9, 0.0, 1e-9);
            for (&s, &y) in scores.iter().zip(labels) {
                let p = sigmoid(a * s + b);
                let r = p - f64::from(y);
                let w = p * (1.0 - p);
                ga += r * s;
                gb += r;
                haa += w * s * s;
                hab += w * s;
                hbb += w;
            }
            let det = haa * hbb - hab * hab;
            if !(det.abs() > 1e-300) {
                break;
            }
            let da = (hbb * ga - hab * gb) / det;
            let db = (haa * gb - hab * ga) / det;
            a -= da;
            b -= db;
            if da.abs() + db.abs() < 1e-12 {
                break;
            }
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite("calibration diverged".to_string()));
        }
        Ok(PlattScaling { a, b })
    }

    pub fn apply(&self, score: f64) -> f64 {
        sigmoid(self.a * score + self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `[FEV1, FVC, FEV1/FVC]`
    SummaryStats,
    /// `[age, sex, smoking, height]`
    Demographic,
}

impl InputKind {
    pub fn features(self, meta: &RecordMeta) -> Vec<f64> {
        match self {
            InputKind::SummaryStats => vec![meta.summary.fev1_l, meta.summary.fvc_l, meta.summary.ratio],
            InputKind::Demographic => meta.demographics.as_features().to_vec(),
        }
    }

    pub fn width(self) -> usize {
        match self {
            InputKind::SummaryStats => 3,
            InputKind::Demographic => 4,
        }
    }

    pub fn method_name(self) -> &'static str {
        match self {
            InputKind::SummaryStats => "mlp_summary",
            InputKind::Demographic => "mlp_demographic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpHyper {
    pub hidden: [usize; 2],
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        MlpHyper {
            hidden: [32, 16],
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            seed: 1,
        }
    }
}

/// Two-hidden-layer GELU network on standardized tabular inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBaseline {
    pub kind: InputKind,
    pub mean: Tensor,
    pub sd: Tensor,
    /// `[w1, b1, w2, b2, w3, b3]`
    pub layers: Vec<Tensor>,
}

const LAYER_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

fn xavier(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor {
    let limit = (6.0 / (out + inp) as f64).sqrt();
    let data = (0..out * inp).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![out, inp], data).expect("shape matches data")
}

fn logits(layers: &[Tensor], x: Tensor, g: &mut Graph, trainable: bool) -> Result<(crate::tensorcore::Var, Vec<crate::tensorcore::Var>)> {
    let vars: Vec<_> = layers
        .iter()
        .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let x = g.constant(x);
    let h = g.linear(x, vars[0], Some(vars[1]))?;
    let h = g.gelu(h);
    let h = g.linear(h, vars[2], Some(vars[3]))?;
    let h = g.gelu(h);
    let z = g.linear(h, vars[4], Some(vars[5]))?;
    Ok((z, vars))
}

impl MlpBaseline {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("mean".to_string(), &self.mean), ("sd".to_string(), &self.sd)];
        for (n, t) in LAYER_NAMES.iter().zip(&self.layers) {
            out.push((n.to_string(), t));
        }
        out
    }

    pub fn from_named(kind: InputKind, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mean = get("mean")?;
        let sd = get("sd")?;
        let layers = LAYER_NAMES.iter().map(|n| get(n)).collect::<Result<Vec<_>>>()?;
        let model = MlpBaseline {
            kind,
            mean,
            sd,
            layers,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let k = self.kind.width();
        let l = &self.layers;
        let ok = self.mean.shape() == [k]
            && self.sd.shape() == [k]
            && l.len() == 6
            && l[0].shape().len() == 2
            && l[0].shape()[1] == k
            && l[1].shape() == [l[0].shape()[0]]
            && l[2].shape().len() == 2
            && l[2].shape()[1] == l[0].shape()[0]
            && l[3].shape() == [l[2].shape()[0]]
            && l[4].shape() == [1, l[2].shape()[0]]
            && l[5].shape() == [1];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "inconsistent {:?} baseline tensor shapes",
                self.kind
            )))
        }
    }

    fn standardize(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let k = self.kind.width();
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.len() != k {
                return Err(Error::Shape(format!(
                    "{:?} baseline expects {k} features, got {}",
                    self.kind,
                    r.len()
                )));
            }
            for ((v, m), s) in r.iter().zip(self.mean.data()).zip(self.sd.data()) {
                data.push((v - m) / s);
            }
        }
        Tensor::matrix(rows.len(), k, data)
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.standardize(rows)?;
        let mut g = Graph::new();
        let (z, _) = logits(&self.layers, x, &mut g, false)?;
        Ok(g.value(z).data().iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn predict(&self, row: &[f64]) -> Result<f64> {
        Ok(self.predict_many(&[row.to_vec()])?[0])
    }
}

fn column_stats(rows: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; k];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let sd = var.iter().map(|s| (s / n).sqrt().max(1e-6)).collect();
    (mean, sd)
}

/// Adam on mean BCE over minibatches; keeps the epoch with the best validation AUC.
pub fn train_mlp_baseline(
    kind: InputKind,
    train_x: &[Vec<f64>],
    train_y: &[u8],
    val_x: &[Vec<f64>],
    val_y: &[u8],
    hyper: &MlpHyper,
) -> Result<MlpBaseline> {
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::Config("baseline training needs non-empty splits".to_string()));
    }
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(Error::Shape("baseline inputs and labels differ in length".to_string()));
    }
    if hyper.batch_size == 0 || hyper.hidden.contains(&0) {
        return Err(Error::Config("baseline batch size and hidden sizes must be positive".to_string()));
    }
    let k = kind.width();
    let (mean, sd) = column_stats(train_x, k);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, kind as u64, STREAM_INIT));
    let [h1, h2] = hyper.hidden;
    let mut model = MlpBaseline {
        kind,
        mean: Tensor::vector(mean),
        sd: Tensor::vector(sd),
        layers: vec![
            xavier(&mut rng, h1, k),
            Tensor::zeros(&[h1]),
            xavier(&mut rng, h2, h1),
            Tensor::zeros(&[h2]),
            xavier(&mut rng, 1, h2),
            Tensor::zeros(&[1]),
        ],
    };
    let xs = model.standardize(train_x)?;
    let mut adam = AdamState::new(model.layers.iter());
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for epoch in 0..hyper.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, epoch as u64, STREAM_SHUFFLE));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let data: Vec<f64> = chunk.iter().flat_map(|&i| xs.row(i).to_vec()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| f64::from(train_y[i])).collect();
            let mut g = Graph::new();
            let (z, vars) = logits(&model.layers, Tensor::matrix(chunk.len(), k, data)?, &mut g, true)?;
            let loss = g.bce_with_logits(z, &targets)?;
            g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|v| g.take_grad(*v).expect("parameter gradient"))
                .collect();
            let mut params: Vec<&mut Tensor> = model.layers.iter_mut().collect();
            adam.step(&mut params, &grads, hyper.lr)?;
        }
        let auc = roc_auc(&model.predict_many(val_x)?, val_y)?;
        if best.as_ref().is_none_or(|(a, _)| auc > *a) {
            best = Some((auc, model.layers.clone()));
        }
    }
    if let Some((_, layers)) = best {
        model.layers = layers;
    }
    Ok(model)
}
