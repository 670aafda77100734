//! Property checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spiro_core::eval::{brier, roc_auc};
use spiro_core::interpret::{cls_attention_profile, Aggregation};
use spiro_core::model::{forward, ModelConfig, ModelParams};
use spiro_core::preproc::{compute_summary, patchify, smooth_gaussian, volume_to_flow, FlowVolumeCurve, DT_S};
use spiro_core::synthdata::{generate_cohort, CohortSpec};

/// Worst observed deviations across random padding cases.
#[derive(Debug, Default, Clone, Copy)]
pub struct PaddingReport {
    pub logit_diff: f64,
    pub pad_attention: f64,
    pub importance_sum_err: f64,
}

pub fn random_curve(rng: &mut ChaCha8Rng, valid_len: usize, t: usize) -> FlowVolumeCurve {
    let mut flow: Vec<f64> = (0..valid_len).map(|_| rng.random_range(-2.0..2.0)).collect();
    flow.resize(t, 0.0);
    FlowVolumeCurve {
        flow_lps: flow,
        valid_len,
        dv_l: 0.01,
    }
}

/// Random models and curves; each curve is run at its tightest padding and at
/// every longer padding the model accepts.
pub fn padding_invariance(cases: usize, seed: u64) -> PaddingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = PaddingReport::default();
    let p = 10;
    let max_patches = 6;
    for _ in 0..cases {
        let cfg = ModelConfig {
            patch_len: p,
            d_embed: 8,
            layers: rng.random_range(1..=2),
            heads: 2,
            head_hidden: 6,
            dropout: 0.0,
            seed: rng.random(),
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, max_patches).unwrap();
        let valid_len = rng.random_range(1..=p * 3);
        let base = random_curve(&mut rng, valid_len, valid_len.div_ceil(p) * p);
        let mut logits = Vec::new();
        for n in base.len() / p..=max_patches {
            let seq = patchify(&base.repadded(n * p).unwrap(), p).unwrap();
            let trace = forward(&params, &seq).unwrap();
            logits.push(trace.logit);
            for a in &trace.attention {
                let (heads, rows) = (a.shape()[0], a.shape()[1]);
                for h in 0..heads {
                    for q in 0..rows {
                        for (k, masked) in seq.mask.iter().enumerate() {
                            if *masked {
                                let w = a.data()[(h * rows + q) * rows + k];
                                rep.pad_attention = rep.pad_attention.max(w.abs());
                            }
                        }
                    }
                }
            }
            for agg in [Aggregation::MeanThenSoftmax, Aggregation::SoftmaxThenMean] {
                let prof = cls_attention_profile(&trace.attention, &seq.mask, agg).unwrap();
                let sum: f64 = prof.importance.iter().sum();
                rep.importance_sum_err = rep.importance_sum_err.max((sum - 1.0).abs());
                for (i, w) in prof.importance.iter().enumerate() {
                    if seq.mask[i + 1] {
                        rep.pad_attention = rep.pad_attention.max(w.abs());
                    }
                }
            }
        }
        for l in &logits {
            rep.logit_diff = rep.logit_diff.max((l - logits[0]).abs());
        }
    }
    rep
}

/// Mann-Whitney by enumerating every positive/negative pair.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MetricReport {
    pub instances: usize,
    pub auc_err: f64,
    pub brier_err: f64,
    pub symmetry_err: f64,
}

pub fn metric_oracles(instances: usize, seed: u64) -> MetricReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = MetricReport::default();
    while rep.instances < instances {
        let n = rng.random_range(2..=12);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.iter().all(|&y| y == labels[0]) {
            continue;
        }
        // few distinct levels so ties are common
        let levels = rng.random_range(1..=n);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 * 0.37 - 1.0)
            .collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        rep.auc_err = rep.auc_err.max((auc - brute_auc(&scores, &labels)).abs());
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let flipped = roc_auc(&neg, &labels).unwrap();
        rep.symmetry_err = rep.symmetry_err.max((auc + flipped - 1.0).abs());
        let direct = probs
            .iter()
            .zip(&labels)
            .map(|(p, &y)| (p - f64::from(y)).powi(2))
            .sum::<f64>()
            / n as f64;
        rep.brier_err = rep.brier_err.max((brier(&probs, &labels).unwrap() - direct).abs());
        rep.instances += 1;
    }
    rep
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FidelityReport {
    pub blows: usize,
    pub fvc_rel: f64,
    pub pef_rel: f64,
    pub integral_rel: f64,
    pub smoothing_abs: f64,
}

/// Noiseless simulator blows against their generating parameters, plus smoothing of constants.
pub fn preprocessing_fidelity(n: usize, seed: u64) -> FidelityReport {
    let spec = CohortSpec {
        noise_sd: 0.0,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(n, &spec, seed).unwrap();
    let mut rep = FidelityReport {
        blows: cohort.len(),
        ..FidelityReport::default()
    };
    for r in &cohort {
        let truth = r.blow_params;
        let blow = r.blow();
        let s = compute_summary(&blow).unwrap();
        rep.fvc_rel = rep.fvc_rel.max((s.fvc_l / truth.fvc_liters - 1.0).abs());
        rep.pef_rel = rep.pef_rel.max((s.pef_lps / truth.pef_lps - 1.0).abs());
        let flow = volume_to_flow(&smooth_gaussian(&blow.volumes_l(), 1.0).unwrap(), DT_S).unwrap();
        let integral = flow.iter().sum::<f64>() * DT_S;
        rep.integral_rel = rep.integral_rel.max((integral / truth.fvc_liters - 1.0).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let c = rng.random_range(-10.0..10.0);
        let len = rng.random_range(1..400);
        let sigma = rng.random_range(0.1..20.0);
        let out = smooth_gaussian(&vec![c; len], sigma).unwrap();
        for v in out {
            rep.smoothing_abs = rep.smoothing_abs.max((v - c).abs());
        }
    }
    rep
}
