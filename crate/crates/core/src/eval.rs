//! ROC-AUC, Brier score and multi-trial aggregation.

use crate::error::{Error, Result};
use crate::synthdata::Endpoint;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} scores vs {} labels", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(Error::Param(format!("label {} at index {i} is not 0/1", labels[i])));
    }
    Ok(())
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores.len(), labels)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("roc_auc: NaN score at index {i}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "roc_auc undefined: labels contain a single class".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the count of correctly ordered pairs, ties contributing 1
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice as f64 / (2 * n_pos * n_neg) as f64)
}

/// Mean squared error between probabilities and 0/1 outcomes.
pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(probs.len(), labels)?;
    if probs.is_empty() {
        return Err(Error::Param("brier: empty input".to_string()));
    }
    if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Param(format!(
            "brier: probability {} at index {i} outside [0, 1]",
            probs[i]
        )));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p - f64::from(y)).powi(2))
        .sum();
    Ok(sum / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub endpoint: Endpoint,
    pub method: String,
    pub auc: f64,
    pub brier: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub endpoint: Endpoint,
    pub method: String,
    pub metric: &'static str,
    pub mean: f64,
    pub sd: f64,
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Mean and sample sd of AUC and Brier for every (endpoint, method) group.
///
/// Each group must contain exactly one result per seed in `seeds`. Rows come out
/// in endpoint order, then method order of first appearance.
pub fn trial_aggregate(results: &[TrialResult], seeds: &[u64]) -> Result<Vec<AggregateRow>> {
    let mut groups: Vec<(Endpoint, String)> = Vec::new();
    for r in results {
        if !groups.iter().any(|(e, m)| *e == r.endpoint && *m == r.method) {
            groups.push((r.endpoint, r.method.clone()));
        }
    }
    groups.sort_by_key(|(e, _)| *e);
    let mut rows = Vec::new();
    for (endpoint, method) in groups {
        let mut members: Vec<&TrialResult> = results
            .iter()
            .filter(|r| r.endpoint == endpoint && r.method == method)
            .collect();
        members.sort_by_key(|r| r.seed);
        let missing: Vec<u64> = seeds
            .iter()
            .copied()
            .filter(|s| !members.iter().any(|r| r.seed == *s))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "{}/{method}: missing seeds {missing:?}",
                endpoint.name()
            )));
        }
        if members.len() != seeds.len() {
            return Err(Error::Schema(format!(
                "{}/{method}: expected {} trials, found {}",
                endpoint.name(),
                seeds.len(),
                members.len()
            )));
        }
        for (metric, pick) in [
            ("roc_auc", (|r: &TrialResult| r.auc) as fn(&TrialResult) -> f64),
            ("brier", |r: &TrialResult| r.brier),
        ] {
            let values: Vec<f64> = members.iter().map(|r| pick(r)).collect();
            let (mean, sd) = mean_sd(&values);
            rows.push(AggregateRow {
                endpoint,
                method: method.clone(),
                metric,
                mean,
                sd,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `endpoint,method,metric,mean,sd`, six decimals.
pub fn to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("endpoint,method,metric,mean,sd\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.endpoint.name(),
            r.method,
            r.metric,
            r.mean,
            r.sd
        );
    }
    out
}
