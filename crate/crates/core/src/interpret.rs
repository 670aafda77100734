//! CLS-attention importance per patch, GOLD-stage cohorts, curve markers and overlays.

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::preproc::{FlowVolumeCurve, SpiroSummary};
use crate::synthdata::Demographics;
use crate::tensorcore::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Grid rounding slack so that e.g. 7.5 rounds up despite binary representation error.
const ROUND_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average raw CLS attention over heads and layers, then softmax over valid patches.
    #[default]
    MeanThenSoftmax,
    /// Softmax each head's row over valid patches, then average.
    SoftmaxThenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    /// One entry per patch; zero on padding patches.
    pub importance: Vec<f64>,
    pub valid_patches: usize,
    pub most_important_patch: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_valid(values: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = values
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values
        .iter()
        .zip(valid)
        .map(|(x, v)| if *v { (x - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Importance of each patch from the CLS query's attention rows.
///
/// `attention` holds one `[heads, N + 1, N + 1]` tensor per layer and `mask`
/// has `N + 1` entries with the CLS slot first.
pub fn cls_attention_profile(
    attention: &[Tensor],
    mask: &[bool],
    aggregation: Aggregation,
) -> Result<AttentionProfile> {
    if attention.is_empty() {
        return Err(Error::Degenerate("trace holds no attention".to_string()));
    }
    let l = mask.len();
    if l < 2 {
        return Err(Error::Shape("mask must cover CLS and at least one patch".to_string()));
    }
    let n = l - 1;
    let valid: Vec<bool> = mask[1..].iter().map(|m| !m).collect();
    let valid_patches = valid.iter().filter(|v| **v).count();
    if valid_patches == 0 {
        return Err(Error::Degenerate("every patch is padding".to_string()));
    }
    let mut rows: Vec<&[f64]> = Vec::new();
    for a in attention {
        let s = a.shape();
        if s.len() != 3 || s[1] != l || s[2] != l {
            return Err(Error::Shape(format!(
                "attention {:?} does not match sequence length {l}",
                s
            )));
        }
        for h in 0..s[0] {
            // query 0 (CLS) toward keys 1..=N
            let start = h * l * l;
            rows.push(&a.data()[start + 1..start + l]);
        }
    }
    let k = rows.len() as f64;
    let importance = match aggregation {
        Aggregation::MeanThenSoftmax => {
            let mut mean = vec![0.0; n];
            for r in &rows {
                for (m, x) in mean.iter_mut().zip(*r) {
                    *m += x / k;
                }
            }
            softmax_valid(&mean, &valid)
        }
        Aggregation::SoftmaxThenMean => {
            let mut mean = vec![0.0; n];
            for r in &rows {
                for (m, x) in mean.iter_mut().zip(softmax_valid(r, &valid)) {
                    *m += x / k;
                }
            }
            let sum: f64 = mean.iter().sum();
            mean.iter_mut().for_each(|x| *x /= sum);
            mean
        }
    };
    Ok(AttentionProfile {
        most_important_patch: argmax(&importance),
        importance,
        valid_patches,
    })
}

/// Element-wise mean of profiles, renormalized.
pub fn cohort_mean_profile(profiles: &[AttentionProfile]) -> Result<AttentionProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Degenerate("cohort has no profiles".to_string()))?;
    let n = first.importance.len();
    if let Some(p) = profiles.iter().find(|p| p.importance.len() != n) {
        return Err(Error::Shape(format!(
            "profiles of {} and {n} patches cannot be averaged",
            p.importance.len()
        )));
    }
    let k = profiles.len() as f64;
    let mut mean = vec![0.0; n];
    for p in profiles {
        for (m, x) in mean.iter_mut().zip(&p.importance) {
            *m += x / k;
        }
    }
    let sum: f64 = mean.iter().sum();
    mean.iter_mut().for_each(|x| *x /= sum);
    Ok(AttentionProfile {
        most_important_patch: argmax(&mean),
        valid_patches: mean.iter().filter(|x| **x > 0.0).count(),
        importance: mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefCoefficients {
    /// Litres per cm of height.
    pub a_height: f64,
    /// Litres per year of age.
    pub b_age: f64,
    pub c: f64,
}

/// Predicted FEV1 = a·height_cm + b·age + c, per sex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEquation {
    pub male: RefCoefficients,
    pub female: RefCoefficients,
}

impl Default for ReferenceEquation {
    /// ECSC-style linear coefficients; replace with a locally appropriate equation.
    fn default() -> Self {
        ReferenceEquation {
            male: RefCoefficients {
                a_height: 0.0430,
                b_age: -0.029,
                c: -2.49,
            },
            female: RefCoefficients {
                a_height: 0.0395,
                b_age: -0.025,
                c: -2.60,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldTag {
    Stage12,
    Stage34,
}

impl GoldTag {
    pub fn name(self) -> &'static str {
        match self {
            GoldTag::Stage12 => "stage12",
            GoldTag::Stage34 => "stage34",
        }
    }
}

pub const GOLD_THRESHOLD_PERCENT: f64 = 50.0;

pub fn fev1_percent_predicted(
    summary: &SpiroSummary,
    demo: &Demographics,
    reference: &ReferenceEquation,
) -> Result<f64> {
    let c = if demo.sex == 1 {
        reference.male
    } else {
        reference.female
    };
    let predicted = c.a_height * demo.height as f64 + c.b_age * demo.age as f64 + c.c;
    if !(predicted > 0.0) {
        return Err(Error::Degenerate(format!(
            "predicted FEV1 {predicted} is not positive"
        )));
    }
    Ok(100.0 * summary.fev1_l / predicted)
}

/// Stage 1–2 iff FEV1 % predicted ≥ 50.
pub fn gold_stratify(
    summary: &SpiroSummary,
    demo: &Demographics,
    reference: &ReferenceEquation,
) -> Result<GoldTag> {
    let pct = fev1_percent_predicted(summary, demo, reference)?;
    Ok(if pct >= GOLD_THRESHOLD_PERCENT {
        GoldTag::Stage12
    } else {
        GoldTag::Stage34
    })
}

/// Volume-grid indices of the PEF and FEF25/50/75 points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub pef_pos: usize,
    pub fef25_pos: usize,
    pub fef50_pos: usize,
    pub fef75_pos: usize,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + ROUND_EPS).floor().max(0.0) as usize
}

pub fn locate_markers(fvc_l: f64, curve: &FlowVolumeCurve) -> Result<MarkerSet> {
    let valid = &curve.flow_lps[..curve.valid_len.min(curve.flow_lps.len())];
    if valid.len() < 2 || !(fvc_l > 0.0) || !(curve.dv_l > 0.0) {
        return Err(Error::Degenerate(format!(
            "cannot place markers on a curve with {} valid samples and FVC {fvc_l}",
            valid.len()
        )));
    }
    let last = valid.len() - 1;
    let at = |q: f64| round_half_up(q * fvc_l / curve.dv_l).min(last);
    Ok(MarkerSet {
        pef_pos: argmax(valid),
        fef25_pos: at(0.25),
        fef50_pos: at(0.50),
        fef75_pos: at(0.75),
    })
}

/// Convenience wrapper taking FVC from a summary.
pub fn locate_markers_for(summary: &SpiroSummary, curve: &FlowVolumeCurve) -> Result<MarkerSet> {
    locate_markers(summary.fvc_l, curve)
}

/// Position-wise mean of raw curves; each position averages the curves that reach it.
/// The valid length follows the mean FVC.
pub fn cohort_mean_curve(curves: &[&FlowVolumeCurve], fvc_l: &[f64]) -> Result<(FlowVolumeCurve, f64)> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Degenerate("cohort has no curves".to_string()))?;
    if curves.len() != fvc_l.len() {
        return Err(Error::Shape("one FVC per curve required".to_string()));
    }
    let t = first.len();
    let mut sum = vec![0.0; t];
    let mut count = vec![0usize; t];
    for c in curves {
        if c.len() != t {
            return Err(Error::Shape("curves differ in length".to_string()));
        }
        for i in 0..c.valid_len {
            sum[i] += c.flow_lps[i];
            count[i] += 1;
        }
    }
    let mean_fvc = fvc_l.iter().sum::<f64>() / fvc_l.len() as f64;
    let valid_len = ((mean_fvc / first.dv_l + ROUND_EPS).floor() as usize + 1).min(t);
    let flow_lps = (0..t)
        .map(|i| {
            if i < valid_len && count[i] > 0 {
                sum[i] / count[i] as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok((
        FlowVolumeCurve {
            flow_lps,
            valid_len,
            dv_l: first.dv_l,
        },
        mean_fvc,
    ))
}

/// Shading opacity for a patch: importance divided by the largest importance.
pub fn shading_opacity(importance: f64, max_importance: f64) -> f64 {
    importance / max_importance
}

/// Writes `<stem>.csv` and `<stem>.svg`; returns both paths.
pub fn overlay_export(
    curve: &FlowVolumeCurve,
    profile: &AttentionProfile,
    markers: &MarkerSet,
    patch_len: usize,
    stem: &Path,
    title: &str,
) -> Result<(PathBuf, PathBuf)> {
    let n = profile.importance.len();
    if patch_len == 0 || curve.valid_len > n * patch_len || curve.valid_len > curve.flow_lps.len() {
        return Err(Error::Shape(format!(
            "curve with {} valid samples does not fit {n} patches of {patch_len}",
            curve.valid_len
        )));
    }
    let mut csv = String::from("volume_l,flow_lps,patch_index,importance\n");
    for i in 0..curve.valid_len {
        let p = i / patch_len;
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            i as f64 * curve.dv_l,
            curve.flow_lps[i],
            p,
            profile.importance[p]
        );
    }
    let svg = render_svg(curve, profile, markers, patch_len, title);
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    write_atomic(&csv_path, csv.as_bytes())?;
    write_atomic(&svg_path, svg.as_bytes())?;
    Ok((csv_path, svg_path))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_svg(
    curve: &FlowVolumeCurve,
    profile: &AttentionProfile,
    markers: &MarkerSet,
    patch_len: usize,
    title: &str,
) -> String {
    let (w, h) = (800.0, 420.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let valid = &curve.flow_lps[..curve.valid_len];
    let x_max = (curve.valid_len.max(2) - 1) as f64;
    let y_max = valid.iter().cloned().fold(0.0, f64::max).max(1e-9) * 1.05;
    let sx = |i: f64| left + (w - left - right) * i / x_max;
    let sy = |f: f64| top + (h - top - bottom) * (1.0 - f / y_max);
    let max_imp = profile.importance.iter().cloned().fold(0.0, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        left,
        escape(title)
    );
    let last_patch = (curve.valid_len - 1) / patch_len;
    for p in 0..=last_patch {
        let x0 = sx((p * patch_len) as f64);
        let x1 = sx((((p + 1) * patch_len).min(curve.valid_len - 1)) as f64);
        let _ = writeln!(
            s,
            r##"<rect class="patch" data-patch="{p}" x="{x0:.3}" y="{top}" width="{:.3}" height="{}" fill="#d62728" fill-opacity="{}" stroke="none"/>"##,
            (x1 - x0).max(0.0),
            h - top - bottom,
            shading_opacity(profile.importance[p], max_imp)
        );
    }
    let mp = profile.most_important_patch;
    let x0 = sx((mp * patch_len) as f64);
    let x1 = sx((((mp + 1) * patch_len).min(curve.valid_len - 1)) as f64);
    let _ = writeln!(
        s,
        r#"<rect class="most-important" x="{x0:.3}" y="{top}" width="{:.3}" height="{}" fill="none" stroke="black" stroke-width="2"/>"#,
        (x1 - x0).max(0.0),
        h - top - bottom
    );
    let _ = writeln!(
        s,
        r##"<path class="axes" d="M{left},{top} V{} H{}" fill="none" stroke="#444"/>"##,
        h - bottom,
        w - right
    );
    let mut points = String::new();
    for (i, f) in valid.iter().enumerate() {
        let _ = write!(points, "{:.3},{:.3} ", sx(i as f64), sy(*f));
    }
    let _ = writeln!(
        s,
        r##"<polyline class="flow" points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        points.trim_end()
    );
    for (label, pos) in [
        ("PEF", markers.pef_pos),
        ("FEF25", markers.fef25_pos),
        ("FEF50", markers.fef50_pos),
        ("FEF75", markers.fef75_pos),
    ] {
        let x = sx(pos as f64);
        let _ = writeln!(
            s,
            r##"<line class="marker" data-label="{label}" x1="{x:.3}" y1="{top}" x2="{x:.3}" y2="{}" stroke="#2ca02c" stroke-dasharray="4 3"/>"##,
            h - bottom
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{}" font-family="sans-serif" font-size="11">{label}</text>"#,
            x + 3.0,
            top + 12.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">volume (L)</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">flow (L/s)</text>"#,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}
