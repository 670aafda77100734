//! Volume-time blows to standardized, patchified flow-volume curves.
//!
//! Order of operations for one blow: mL → L, Gaussian smoothing (σ = 1 sample)
//! of the volume series, forward-difference flow, interpolation of flow onto a
//! uniform volume grid, zero right-padding to a fixed length.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Sampling interval of raw blows, in seconds.
pub const DT_S: f64 = 0.010;

/// Relative slack used when turning volumes into grid counts, so that e.g.
/// 0.3 L / 0.01 L counts as 30 steps despite binary rounding.
const GRID_EPS: f64 = 1e-9;

/// One forced exhalation as recorded: cumulative volume in mL every 10 ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeTimeSeries {
    pub volume_ml: Vec<u32>,
    pub acceptability_code: i64,
}

impl VolumeTimeSeries {
    pub fn dt_s(&self) -> f64 {
        DT_S
    }

    pub fn volumes_l(&self) -> Vec<f64> {
        self.volume_ml.iter().map(|&v| v as f64 / 1000.0).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.volume_ml.len().saturating_sub(1) as f64 * DT_S
    }
}

/// Acceptability codes 0 and 32 mark a usable blow.
pub fn validate_blow(acceptability_code: i64) -> bool {
    matches!(acceptability_code, 0 | 32)
}

/// Classical spirometry measures of one blow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpiroSummary {
    pub fev1_l: f64,
    pub fvc_l: f64,
    pub pef_lps: f64,
    pub fef25_lps: f64,
    pub fef50_lps: f64,
    pub fef75_lps: f64,
    pub ratio: f64,
}

/// FEV1 and FVC come from the raw volume series; PEF and the FEFs from the
/// flow of the smoothed series.
pub fn compute_summary(blow: &VolumeTimeSeries) -> Result<SpiroSummary> {
    let raw = blow.volumes_l();
    if raw.len() < 2 {
        return Err(Error::Degenerate(format!(
            "blow has {} samples, need at least 2",
            raw.len()
        )));
    }
    let one_second = (1.0 / DT_S).round() as usize;
    if raw.len() <= one_second {
        return Err(Error::Degenerate(format!(
            "FEV1 undefined: blow lasts {:.2} s (< 1 s)",
            blow.duration_s()
        )));
    }
    let fvc = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if fvc <= 0.0 {
        return Err(Error::Degenerate("zero FVC".to_string()));
    }
    // linear interpolation at t = 1.0 s, which lands on a sample
    let fev1 = interp_at_time(&raw, 1.0);
    let smoothed = running_max(&smooth_gaussian(&raw, 1.0)?);
    let flow = volume_to_flow(&smoothed, DT_S)?;
    let pef = flow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let fef = |q: f64| flow_at_volume_crossing(&flow, &smoothed, q * fvc);
    Ok(SpiroSummary {
        fev1_l: fev1,
        fvc_l: fvc,
        pef_lps: pef,
        fef25_lps: fef(0.25),
        fef50_lps: fef(0.50),
        fef75_lps: fef(0.75),
        ratio: fev1 / fvc,
    })
}

fn interp_at_time(series: &[f64], t: f64) -> f64 {
    let pos = t / DT_S;
    let i = pos.floor() as usize;
    if i + 1 >= series.len() {
        return *series.last().expect("non-empty");
    }
    let frac = pos - i as f64;
    series[i] + frac * (series[i + 1] - series[i])
}

/// Flow at the first sample whose (aligned) volume reaches `target`.
fn flow_at_volume_crossing(flow: &[f64], volume: &[f64], target: f64) -> f64 {
    let idx = volume[..flow.len()]
        .iter()
        .position(|&v| v >= target)
        .unwrap_or(flow.len() - 1);
    flow[idx]
}

fn running_max(series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut m = f64::NEG_INFINITY;
    for &v in series {
        m = m.max(v);
        out.push(m);
    }
    out
}

/// Linear-interpolation (inclusive) percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Indices of blows whose FEV1, FVC and PEF all lie within the 0.5th..99.5th
/// percentile band of the list.
pub fn qc_filter(summaries: &[SpiroSummary]) -> Result<Vec<usize>> {
    if summaries.is_empty() {
        return Err(Error::Degenerate("qc_filter on an empty list".to_string()));
    }
    let measures: [fn(&SpiroSummary) -> f64; 3] = [|s| s.fev1_l, |s| s.fvc_l, |s| s.pef_lps];
    let bounds: Vec<(f64, f64)> = measures
        .iter()
        .map(|f| {
            let mut v: Vec<f64> = summaries.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            (percentile_sorted(&v, 0.005), percentile_sorted(&v, 0.995))
        })
        .collect();
    Ok(summaries
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            measures
                .iter()
                .zip(&bounds)
                .all(|(f, &(lo, hi))| f(s) >= lo && f(s) <= hi)
        })
        .map(|(i, _)| i)
        .collect())
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("sigma must be > 0, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for w in &mut k {
        *w /= s;
    }
    Ok(k)
}

/// Half-sample symmetric reflection of an out-of-range index (`d c b a | a b c d`).
fn reflect_index(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Discrete Gaussian convolution with reflect-padded boundaries.
pub fn smooth_gaussian(series: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(sigma)?;
    let n = series.len() as i64;
    if n == 0 {
        return Ok(Vec::new());
    }
    let r = (kernel.len() / 2) as i64;
    let out = (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * series[reflect_index(i + j as i64 - r, n)])
                .sum()
        })
        .collect();
    Ok(out)
}

/// Forward difference `(V[t+1] - V[t]) / dt`; one sample shorter than the input.
pub fn volume_to_flow(volume_l: &[f64], dt_s: f64) -> Result<Vec<f64>> {
    if volume_l.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 volume samples, got {}",
            volume_l.len()
        )));
    }
    Ok(volume_l.windows(2).map(|w| (w[1] - w[0]) / dt_s).collect())
}

/// Flow (L/s) on a uniform volume grid, zero right-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowVolumeCurve {
    pub flow_lps: Vec<f64>,
    pub valid_len: usize,
    pub dv_l: f64,
}

impl FlowVolumeCurve {
    pub fn len(&self) -> usize {
        self.flow_lps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow_lps.is_empty()
    }

    /// Same curve, zero-padded (or trimmed of padding) to `t_max` samples.
    pub fn repadded(&self, t_max: usize) -> Result<FlowVolumeCurve> {
        if t_max < self.valid_len {
            return Err(Error::CurveTooLong {
                needed: self.valid_len,
                t_max,
            });
        }
        let mut flow = self.flow_lps[..self.valid_len].to_vec();
        flow.resize(t_max, 0.0);
        Ok(FlowVolumeCurve {
            flow_lps: flow,
            valid_len: self.valid_len,
            dv_l: self.dv_l,
        })
    }
}

/// Number of grid samples from 0 up to `fvc` inclusive.
pub fn grid_len(fvc_l: f64, dv_l: f64) -> usize {
    (fvc_l / dv_l + GRID_EPS).floor() as usize + 1
}

/// Interpolate `flow` (aligned with `volume` sample-by-sample; `volume` may be
/// one longer) onto `{0, dv, 2dv, ...}` up to FVC, then right-pad to `t_max`.
pub fn build_flow_volume(
    flow: &[f64],
    volume: &[f64],
    dv_l: f64,
    t_max: usize,
) -> Result<FlowVolumeCurve> {
    if flow.is_empty() || volume.len() < flow.len() {
        return Err(Error::Shape(format!(
            "flow has {} samples but volume only {}",
            flow.len(),
            volume.len()
        )));
    }
    if !(dv_l > 0.0) {
        return Err(Error::Param(format!("dv_l must be > 0, got {dv_l}")));
    }
    let volume = running_max(volume);
    let fvc = *volume.last().expect("non-empty");
    if fvc <= 0.0 {
        return Err(Error::Degenerate("zero FVC".to_string()));
    }
    let valid_len = grid_len(fvc, dv_l);
    if valid_len > t_max {
        return Err(Error::CurveTooLong {
            needed: valid_len,
            t_max,
        });
    }
    let aligned = &volume[..flow.len()];
    let mut out = vec![0.0; t_max];
    let mut i = 0usize;
    for (k, slot) in out.iter_mut().take(valid_len).enumerate() {
        let v = k as f64 * dv_l;
        while i < aligned.len() && aligned[i] < v {
            i += 1;
        }
        *slot = if i == aligned.len() {
            flow[flow.len() - 1]
        } else if i == 0 {
            flow[0]
        } else {
            let (v0, v1) = (aligned[i - 1], aligned[i]);
            let frac = (v - v0) / (v1 - v0);
            flow[i - 1] + frac * (flow[i] - flow[i - 1])
        };
    }
    Ok(FlowVolumeCurve {
        flow_lps: out,
        valid_len,
        dv_l,
    })
}

/// Non-overlapping patches plus a padding mask with a leading slot for CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// Row-major `[n_patches, patch_len]`.
    pub patches: Vec<f64>,
    pub patch_len: usize,
    pub n_patches: usize,
    /// `mask[0]` is CLS (never masked); `mask[i + 1]` is true iff patch `i` is all padding.
    pub mask: Vec<bool>,
}

impl PatchSequence {
    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn valid_patches(&self) -> usize {
        self.mask[1..].iter().filter(|m| !**m).count()
    }
}

pub fn patchify(curve: &FlowVolumeCurve, patch_len: usize) -> Result<PatchSequence> {
    let t = curve.len();
    if patch_len == 0 || !t.is_multiple_of(patch_len) {
        return Err(Error::Config(format!(
            "curve length {t} is not divisible by patch length {patch_len}"
        )));
    }
    let n = t / patch_len;
    let mut mask = Vec::with_capacity(n + 1);
    mask.push(false);
    mask.extend((0..n).map(|i| i * patch_len >= curve.valid_len));
    Ok(PatchSequence {
        patches: curve.flow_lps.clone(),
        patch_len,
        n_patches: n,
        mask,
    })
}

/// Per-position z-scoring fit on training curves over their valid samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

pub const SD_FLOOR: f64 = 1e-6;

pub fn fit_standardizer(curves: &[&FlowVolumeCurve]) -> Result<Standardizer> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Degenerate("fit_standardizer on an empty set".to_string()))?;
    let t = first.len();
    if let Some(bad) = curves.iter().find(|c| c.len() != t) {
        return Err(Error::Shape(format!(
            "standardizer curves differ in length: {t} vs {}",
            bad.len()
        )));
    }
    // fixed-order two-pass reduction
    let mut count = vec![0usize; t];
    let mut sum = vec![0.0; t];
    for c in curves {
        for i in 0..c.valid_len {
            count[i] += 1;
            sum[i] += c.flow_lps[i];
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; t];
    for c in curves {
        for i in 0..c.valid_len {
            let d = c.flow_lps[i] - mean[i];
            sq[i] += d * d;
        }
    }
    let sd = sq
        .iter()
        .zip(&count)
        .map(|(s, &n)| {
            if n > 0 {
                (s / n as f64).sqrt().max(SD_FLOOR)
            } else {
                1.0
            }
        })
        .collect();
    Ok(Standardizer { mean, sd })
}

impl Standardizer {
    /// Z-score valid positions; padding stays exactly zero.
    pub fn apply(&self, curve: &FlowVolumeCurve) -> Result<FlowVolumeCurve> {
        if curve.len() > self.mean.len() {
            return Err(Error::Shape(format!(
                "curve length {} exceeds standardizer length {}",
                curve.len(),
                self.mean.len()
            )));
        }
        let mut flow = vec![0.0; curve.len()];
        for (i, slot) in flow.iter_mut().enumerate().take(curve.valid_len) {
            *slot = (curve.flow_lps[i] - self.mean[i]) / self.sd[i];
        }
        Ok(FlowVolumeCurve {
            flow_lps: flow,
            valid_len: curve.valid_len,
            dv_l: curve.dv_l,
        })
    }
}

/// Grid and patching settings for turning blows into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub dv_l: f64,
    pub t_max: usize,
    pub patch_len: usize,
    pub sigma: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            dv_l: 0.01,
            t_max: 1024,
            patch_len: 30,
            sigma: 1.0,
        }
    }
}

impl PreprocConfig {
    /// `t_max` rounded up to a multiple of the patch length.
    pub fn padded_len(&self) -> usize {
        self.t_max.div_ceil(self.patch_len) * self.patch_len
    }
}

/// Full single-blow pipeline: smoothing, flow, flow-volume grid, padding.
pub fn blow_to_curve(blow: &VolumeTimeSeries, cfg: &PreprocConfig) -> Result<FlowVolumeCurve> {
    let smoothed = smooth_gaussian(&blow.volumes_l(), cfg.sigma)?;
    let flow = volume_to_flow(&smoothed, DT_S)?;
    build_flow_volume(&flow, &smoothed, cfg.dv_l, cfg.padded_len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_blow(rate_lps: f64, seconds: f64) -> VolumeTimeSeries {
        let n = (seconds / DT_S).round() as usize + 1;
        VolumeTimeSeries {
            volume_ml: (0..n)
                .map(|i| (rate_lps * i as f64 * DT_S * 1000.0_f64).round() as u32)
                .collect(),
            acceptability_code: 0,
        }
    }

    #[test]
    fn acceptability_codes() {
        assert!(validate_blow(0));
        assert!(validate_blow(32));
        assert!(!validate_blow(7));
        assert!(!validate_blow(-1));
    }

    #[test]
    fn linear_ramp_summary() {
        let s = compute_summary(&ramp_blow(3.0, 2.0)).unwrap();
        assert!((s.fev1_l - 3.0).abs() < 1e-12);
        assert!((s.fvc_l - 6.0).abs() < 1e-12);
        for f in [s.pef_lps, s.fef25_lps, s.fef50_lps, s.fef75_lps] {
            assert!((f - 3.0).abs() < 1e-9, "{f}");
        }
        assert!((s.ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_flow_after_one_second_gives_unit_ratio() {
        let mut blow = ramp_blow(3.0, 1.0);
        let last = *blow.volume_ml.last().unwrap();
        blow.volume_ml.extend(std::iter::repeat_n(last, 100));
        let s = compute_summary(&blow).unwrap();
        assert_eq!(s.ratio, 1.0);
    }

    #[test]
    fn summary_errors() {
        let short = ramp_blow(3.0, 0.5);
        assert!(matches!(compute_summary(&short), Err(Error::Degenerate(m)) if m.contains("FEV1")));
        let flat = VolumeTimeSeries {
            volume_ml: vec![0; 200],
            acceptability_code: 0,
        };
        assert!(matches!(compute_summary(&flat), Err(Error::Degenerate(m)) if m.contains("FVC")));
    }

    #[test]
    fn flow_difference_quotient() {
        let f = volume_to_flow(&[0.0, 0.03, 0.06], 0.01).unwrap();
        assert_eq!(f.len(), 2);
        for v in f {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert!(volume_to_flow(&[1.0], 0.01).is_err());
    }

    #[test]
    fn flow_of_sine_matches_midpoint_cosine() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 * DT_S).sin()).collect();
        let f = volume_to_flow(&v, DT_S).unwrap();
        let max_err = f
            .iter()
            .enumerate()
            .map(|(i, fi)| (fi - (i as f64 * DT_S + DT_S / 2.0).cos()).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-4, "{max_err}");
    }

    #[test]
    fn smoothing_contract() {
        let c = vec![2.5; 37];
        for v in smooth_gaussian(&c, 1.0).unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        assert!(smooth_gaussian(&c, 0.0).is_err());
        assert!(smooth_gaussian(&c, -1.0).is_err());

        // impulse response equals closed-form normalized taps
        let mut impulse = vec![0.0; 21];
        impulse[10] = 1.0;
        let out = smooth_gaussian(&impulse, 1.0).unwrap();
        let norm: f64 = (-4i32..=4).map(|k| (-(k * k) as f64 / 2.0).exp()).sum();
        for k in -4i32..=4 {
            let want = (-(k * k) as f64 / 2.0).exp() / norm;
            assert!((out[(10 + k) as usize] - want).abs() < 1e-15);
        }
        assert_eq!(out[5], 0.0);
    }

    #[test]
    fn reflect_padding_preserves_mass_near_edges() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let y = smooth_gaussian(&x, 1.0).unwrap();
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        assert!((sx - sy).abs() < 1e-9, "{sx} vs {sy}");
        // shorter than the kernel radius: reflection wraps more than once
        let x = vec![1.0, 4.0, -2.0];
        let y = smooth_gaussian(&x, 1.0).unwrap();
        assert!((x.iter().sum::<f64>() - y.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn constant_flow_onto_volume_grid() {
        let volume: Vec<f64> = (0..=10).map(|i| i as f64 * 0.03).collect();
        let flow = volume_to_flow(&volume, 0.01).unwrap();
        let c = build_flow_volume(&flow, &volume, 0.01, 90).unwrap();
        assert_eq!(c.valid_len, 31);
        assert_eq!(c.len(), 90);
        for (i, f) in c.flow_lps.iter().enumerate() {
            if i < 31 {
                assert!((f - 3.0).abs() < 1e-9);
            } else {
                assert_eq!(*f, 0.0);
            }
        }
        let short: Vec<f64> = (0..=5).map(|i| i as f64 * 0.03).collect();
        let c2 = build_flow_volume(&flow[..5], &short, 0.01, 90).unwrap();
        assert_eq!(c2.len(), c.len());
        assert_eq!(c2.valid_len, 16);
    }

    #[test]
    fn overflowing_curve_is_reported() {
        let volume: Vec<f64> = (0..=10).map(|i| i as f64 * 0.03).collect();
        let flow = volume_to_flow(&volume, 0.01).unwrap();
        assert!(matches!(
            build_flow_volume(&flow, &volume, 0.01, 30),
            Err(Error::CurveTooLong { needed: 31, t_max: 30 })
        ));
    }

    #[test]
    fn non_monotone_volume_is_clamped() {
        let volume = vec![0.0, 0.02, 0.015, 0.04, 0.05];
        let flow = volume_to_flow(&running_max(&volume), 0.01).unwrap();
        assert!(flow.iter().all(|f| *f >= 0.0));
        let c = build_flow_volume(&flow, &volume, 0.01, 30).unwrap();
        assert!(c.flow_lps.iter().all(|f| *f >= 0.0));
    }

    fn curve(valid_len: usize, t: usize) -> FlowVolumeCurve {
        let mut flow: Vec<f64> = (0..valid_len).map(|i| 1.0 + i as f64).collect();
        flow.resize(t, 0.0);
        FlowVolumeCurve {
            flow_lps: flow,
            valid_len,
            dv_l: 0.01,
        }
    }

    #[test]
    fn patchify_masks() {
        let p = patchify(&curve(90, 90), 30).unwrap();
        assert_eq!(p.n_patches, 3);
        assert_eq!(p.mask, vec![false; 4]);
        let p = patchify(&curve(1, 90), 30).unwrap();
        assert_eq!(p.mask, vec![false, false, true, true]);
        let p = patchify(&curve(31, 90), 30).unwrap();
        assert_eq!(p.mask, vec![false, false, false, true]);
        assert!(matches!(patchify(&curve(5, 91), 30), Err(Error::Config(_))));
    }

    #[test]
    fn standardizer_identical_curves_and_padding() {
        let c = curve(40, 90);
        let st = fit_standardizer(&[&c, &c, &c]).unwrap();
        let z = st.apply(&c).unwrap();
        assert!(z.flow_lps.iter().all(|v| *v == 0.0));
        let other = curve(60, 90);
        let z = st.apply(&other).unwrap();
        assert!(z.flow_lps[60..].iter().all(|v| *v == 0.0));
        assert!(fit_standardizer(&[]).is_err());
    }

    #[test]
    fn qc_identical_keeps_all() {
        let s = SpiroSummary {
            fev1_l: 3.0,
            fvc_l: 4.0,
            pef_lps: 8.0,
            fef25_lps: 6.0,
            fef50_lps: 4.0,
            fef75_lps: 2.0,
            ratio: 0.75,
        };
        assert_eq!(qc_filter(&vec![s; 50]).unwrap().len(), 50);
        assert!(qc_filter(&[]).is_err());
    }

    #[test]
    fn padded_len_rounds_up_to_patch_multiple() {
        let cfg = PreprocConfig::default();
        assert_eq!(cfg.padded_len(), 1050);
        assert_eq!(cfg.padded_len() % cfg.patch_len, 0);
    }
}
