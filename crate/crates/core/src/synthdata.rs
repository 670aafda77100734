//! Parameterized synthetic spirograms and labelled cohorts.
//!
//! Flow rises as `PEF·sin²(πt / 2t_r)` until the peak at `t_r` and is held at
//! PEF for [`PEAK_HOLD_S`]. After the peak the descending limb follows `F = PEF·(R/R₀)^γ` in remaining volume `R`, with
//! `γ = 1 + 2·scoop`: γ = 1 is a straight limb in flow-volume space (an
//! exponential tail in time), larger γ scoops it. The asymptotic capacity is
//! solved so that the volume reaches exactly FVC at the end of the recording.

use crate::error::{Error, Result};
use crate::preproc::{VolumeTimeSeries, DT_S};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Exponent gain: γ = 1 + SCOOP_GAIN · scoop.
pub const SCOOP_GAIN: f64 = 2.0;

/// Flow stays at PEF this long before the descending limb starts.
pub const PEAK_HOLD_S: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowParams {
    pub fvc_liters: f64,
    pub pef_lps: f64,
    pub scoop: f64,
    pub rise_time_s: f64,
    pub noise_sd: f64,
    pub duration_s: f64,
}

impl BlowParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        let bad = |m: String| Err(Error::Param(m));
        if !(0.5..=8.0).contains(&p.fvc_liters) {
            return bad(format!("fvc_liters {} outside [0.5, 8.0]", p.fvc_liters));
        }
        if !(1.0..=16.0).contains(&p.pef_lps) {
            return bad(format!("pef_lps {} outside [1.0, 16.0]", p.pef_lps));
        }
        if !(0.0..=1.0).contains(&p.scoop) {
            return bad(format!("scoop {} outside [0, 1]", p.scoop));
        }
        if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
            return bad(format!("noise_sd {} must be >= 0", p.noise_sd));
        }
        if !(p.rise_time_s > 0.0 && p.duration_s > 0.0 && p.rise_time_s < p.duration_s) {
            return bad(format!(
                "need 0 < rise_time_s ({}) < duration_s ({})",
                p.rise_time_s, p.duration_s
            ));
        }
        let peak_end = p.rise_time_s + PEAK_HOLD_S;
        let peak_volume = p.pef_lps * (p.rise_time_s / 2.0 + PEAK_HOLD_S);
        if peak_end >= p.duration_s || peak_volume >= p.fvc_liters {
            return bad(format!(
                "rise and peak exhale {peak_volume:.3} L by {peak_end:.3} s, \
                 not less than FVC {} within {} s",
                p.fvc_liters, p.duration_s
            ));
        }
        let reachable = peak_volume + p.pef_lps * (p.duration_s - peak_end);
        if reachable <= p.fvc_liters {
            return bad(format!(
                "FVC {} cannot be exhaled within {} s at PEF {}",
                p.fvc_liters, p.duration_s, p.pef_lps
            ));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        1.0 + SCOOP_GAIN * self.scoop
    }
}

/// Closed-form noiseless blow for one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct BlowModel {
    params: BlowParams,
    gamma: f64,
    rise_volume: f64,
    /// Volume where the descending limb starts.
    limb_volume: f64,
    limb_start_s: f64,
    /// Remaining volume (to the asymptote) at the start of the limb.
    r0: f64,
}

impl BlowModel {
    pub fn new(params: BlowParams) -> Result<Self> {
        params.validate()?;
        let gamma = params.gamma();
        let rise_volume = params.pef_lps * params.rise_time_s / 2.0;
        let limb_volume = rise_volume + params.pef_lps * PEAK_HOLD_S;
        let limb_start_s = params.rise_time_s + PEAK_HOLD_S;
        let target = params.fvc_liters - limb_volume;
        let tail = params.duration_s - limb_start_s;
        // exhaled-after-peak is increasing in r0 and tends to PEF·tail
        let exhaled = |r0: f64| r0 - remaining(r0, gamma, params.pef_lps, tail);
        let (mut lo, mut hi) = (target, target * 2.0);
        while exhaled(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if exhaled(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        Ok(BlowModel {
            params,
            gamma,
            rise_volume,
            limb_volume,
            limb_start_s,
            r0: 0.5 * (lo + hi),
        })
    }

    pub fn params(&self) -> &BlowParams {
        &self.params
    }

    /// Volume where flow first reaches PEF.
    pub fn peak_volume(&self) -> f64 {
        self.rise_volume
    }

    /// Volume where the descending limb begins (end of the PEF hold).
    pub fn limb_start_volume(&self) -> f64 {
        self.limb_volume
    }

    pub fn volume_at(&self, t: f64) -> f64 {
        let p = &self.params;
        if t <= 0.0 {
            0.0
        } else if t >= p.duration_s {
            p.fvc_liters
        } else if t <= p.rise_time_s {
            0.5 * p.pef_lps * (t - p.rise_time_s / PI * (PI * t / p.rise_time_s).sin())
        } else if t <= self.limb_start_s {
            self.rise_volume + p.pef_lps * (t - p.rise_time_s)
        } else {
            let r = remaining(self.r0, self.gamma, p.pef_lps, t - self.limb_start_s);
            self.limb_volume + self.r0 - r
        }
    }

    pub fn flow_at(&self, t: f64) -> f64 {
        let p = &self.params;
        if t < 0.0 || t > p.duration_s {
            0.0
        } else if t <= p.rise_time_s {
            let s = (PI * t / (2.0 * p.rise_time_s)).sin();
            p.pef_lps * s * s
        } else if t <= self.limb_start_s {
            p.pef_lps
        } else {
            let r = remaining(self.r0, self.gamma, p.pef_lps, t - self.limb_start_s);
            p.pef_lps * (r / self.r0).powf(self.gamma)
        }
    }

    /// Flow on the descending limb as a function of exhaled volume `v >= limb_start_volume()`.
    pub fn descending_flow_at_volume(&self, v: f64) -> f64 {
        let r = self.limb_volume + self.r0 - v;
        self.params.pef_lps * (r / self.r0).max(0.0).powf(self.gamma)
    }
}

/// Remaining volume `u` seconds after the peak under `dR/du = -PEF (R/R₀)^γ`.
fn remaining(r0: f64, gamma: f64, pef: f64, u: f64) -> f64 {
    if (gamma - 1.0).abs() < 1e-12 {
        r0 * (-pef * u / r0).exp()
    } else {
        r0 * (1.0 + (gamma - 1.0) * pef * u / r0).powf(-1.0 / (gamma - 1.0))
    }
}

/// Additive volume noise is Gaussian truncated at ±2 sd.
fn truncated_normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sd).expect("sd > 0");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * sd {
            return x;
        }
    }
}

/// Sample a blow at 10 ms steps; volumes are rounded to whole mL.
pub fn synth_volume_curve(params: &BlowParams, seed: u64) -> Result<VolumeTimeSeries> {
    let model = BlowModel::new(*params)?;
    let n = (params.duration_s / DT_S).round() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let volume_ml = (0..n)
        .map(|i| {
            let t = if i + 1 == n {
                params.duration_s
            } else {
                i as f64 * DT_S
            };
            let v = model.volume_at(t) + truncated_normal(&mut rng, params.noise_sd);
            (v * 1000.0).round().max(0.0) as u32
        })
        .collect();
    Ok(VolumeTimeSeries {
        volume_ml,
        acceptability_code: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: u32,
    /// 1 = male, 0 = female.
    pub sex: u8,
    /// 1 = ever smoker.
    pub smoking: u8,
    pub height: u32,
}

impl Demographics {
    pub fn validate(&self) -> Result<()> {
        if !(18..=100).contains(&self.age) {
            return Err(Error::Schema(format!("age {} outside [18, 100]", self.age)));
        }
        if !(120..=220).contains(&self.height) {
            return Err(Error::Schema(format!(
                "height {} outside [120, 220] cm",
                self.height
            )));
        }
        if self.sex > 1 || self.smoking > 1 {
            return Err(Error::Schema("sex and smoking must be 0 or 1".to_string()));
        }
        Ok(())
    }

    /// `[age, sex, smoking, height]`, the fixed order used for feature fusion.
    pub fn as_features(&self) -> [f64; 4] {
        [
            self.age as f64,
            self.sex as f64,
            self.smoking as f64,
            self.height as f64,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EndpointLabels {
    pub copd_risk: u8,
    pub mortality: u8,
    pub exacerbation: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    CopdRisk,
    Mortality,
    Exacerbation,
}

impl Endpoint {
    pub const ALL: [Endpoint; 3] = [Endpoint::CopdRisk, Endpoint::Mortality, Endpoint::Exacerbation];

    pub fn name(self) -> &'static str {
        match self {
            Endpoint::CopdRisk => "copd_risk",
            Endpoint::Mortality => "mortality",
            Endpoint::Exacerbation => "exacerbation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Endpoint::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown endpoint {s:?}")))
    }
}

impl EndpointLabels {
    pub fn get(&self, endpoint: Endpoint) -> u8 {
        match endpoint {
            Endpoint::CopdRisk => self.copd_risk,
            Endpoint::Mortality => self.mortality,
            Endpoint::Exacerbation => self.exacerbation,
        }
    }

    fn set(&mut self, endpoint: Endpoint, v: u8) {
        match endpoint {
            Endpoint::CopdRisk => self.copd_risk = v,
            Endpoint::Mortality => self.mortality = v,
            Endpoint::Exacerbation => self.exacerbation = v,
        }
    }
}

/// One line of a cohort NDJSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub id: String,
    pub volume_ml: Vec<u32>,
    pub age: u32,
    pub sex: u8,
    pub smoking: u8,
    pub height_cm: u32,
    pub copd_risk: u8,
    pub mortality: u8,
    pub exacerbation: u8,
    pub blow_params: BlowParams,
    /// Only written when non-zero; absent means an acceptable blow.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub acceptability_code: i64,
}

fn is_zero(v: &i64) -> bool {
    *v == 0
}

impl CohortRecord {
    pub fn blow(&self) -> VolumeTimeSeries {
        VolumeTimeSeries {
            volume_ml: self.volume_ml.clone(),
            acceptability_code: self.acceptability_code,
        }
    }

    pub fn demographics(&self) -> Demographics {
        Demographics {
            age: self.age,
            sex: self.sex,
            smoking: self.smoking,
            height: self.height_cm,
        }
    }

    pub fn labels(&self) -> EndpointLabels {
        EndpointLabels {
            copd_risk: self.copd_risk,
            mortality: self.mortality,
            exacerbation: self.exacerbation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoopDistribution {
    Uniform { low: f64, high: f64 },
    Choice { values: Vec<f64> },
}

/// Logit contribution per unit of each centred covariate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskWeights {
    /// per unit of `scoop - 0.5`
    pub scoop: f64,
    /// per litre of `fvc - 4`
    pub fvc: f64,
    /// per L/s of `pef - 8`
    pub pef: f64,
    /// per decade of `age - 55`
    pub age: f64,
    pub smoking: f64,
    pub sex: f64,
    /// per 10 cm of `height - 170`
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LabelRule {
    /// label = 1 iff scoop > threshold
    Deterministic { threshold: f64 },
    /// label ~ Bernoulli(sigmoid(b + w·x)) with `b` solved so the expected
    /// prevalence over the drawn cohort equals `prevalence`.
    Probabilistic { prevalence: f64, weights: RiskWeights },
}

impl LabelRule {
    fn validate(&self) -> Result<()> {
        match self {
            LabelRule::Deterministic { threshold } if !threshold.is_finite() => Err(
                Error::Config(format!("deterministic threshold {threshold} is not finite")),
            ),
            LabelRule::Probabilistic { prevalence, .. } if !(*prevalence > 0.0 && *prevalence < 1.0) => {
                Err(Error::Config(format!(
                    "target prevalence {prevalence} is unsatisfiable; must lie in (0, 1)"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Distributions for blow shapes, demographics and endpoint labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub scoop: ScoopDistribution,
    pub rise_time_s: (f64, f64),
    /// PEF drawn as FVC times a uniform factor in this range.
    pub pef_per_fvc: (f64, f64),
    /// Log-normal spread of FVC around the height/age/sex prediction.
    pub fvc_log_sd: f64,
    pub noise_sd: f64,
    pub duration_s: f64,
    pub smoking_rate: f64,
    pub age_range: (u32, u32),
    /// Fraction of blows marked unacceptable (code 7).
    pub invalid_fraction: f64,
    pub copd_risk: LabelRule,
    pub mortality: LabelRule,
    pub exacerbation: LabelRule,
}

impl Default for CohortSpec {
    /// The default benchmark: labels driven mainly by descending-limb shape,
    /// with a smaller FVC term and mild age/smoking effects.
    fn default() -> Self {
        let base = RiskWeights {
            scoop: 27.0,
            fvc: -2.7,
            age: 1.5,
            smoking: 1.8,
            ..RiskWeights::default()
        };
        CohortSpec {
            scoop: ScoopDistribution::Uniform { low: 0.0, high: 1.0 },
            rise_time_s: (0.15, 0.25),
            pef_per_fvc: (1.4, 2.4),
            fvc_log_sd: 0.12,
            noise_sd: 0.002,
            duration_s: 6.0,
            smoking_rate: 0.4,
            age_range: (40, 70),
            invalid_fraction: 0.0,
            copd_risk: LabelRule::Probabilistic {
                prevalence: 0.3,
                weights: base,
            },
            mortality: LabelRule::Probabilistic {
                prevalence: 0.15,
                weights: RiskWeights {
                    age: 2.7,
                    ..base
                },
            },
            exacerbation: LabelRule::Probabilistic {
                prevalence: 0.2,
                weights: RiskWeights {
                    smoking: 2.7,
                    ..base
                },
            },
        }
    }
}

impl CohortSpec {
    /// Cohort whose classes differ only after the peak: copd_risk = 1 iff scoop > 0.5,
    /// with the other endpoints following the same rule.
    pub fn planted_scoop() -> Self {
        let rule = LabelRule::Deterministic { threshold: 0.5 };
        CohortSpec {
            copd_risk: rule.clone(),
            mortality: rule.clone(),
            exacerbation: rule,
            ..CohortSpec::default()
        }
    }

    pub fn rule(&self, endpoint: Endpoint) -> &LabelRule {
        match endpoint {
            Endpoint::CopdRisk => &self.copd_risk,
            Endpoint::Mortality => &self.mortality,
            Endpoint::Exacerbation => &self.exacerbation,
        }
    }

    fn validate(&self) -> Result<()> {
        for e in Endpoint::ALL {
            self.rule(e).validate()?;
        }
        match &self.scoop {
            ScoopDistribution::Uniform { low, high } if !(0.0 <= *low && low <= high && *high <= 1.0) => {
                return Err(Error::Config(format!("scoop range [{low}, {high}] not within [0, 1]")))
            }
            ScoopDistribution::Choice { values } if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                return Err(Error::Config("scoop choices must be non-empty and within [0, 1]".to_string()))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.invalid_fraction) || !(0.0..=1.0).contains(&self.smoking_rate) {
            return Err(Error::Config("fractions must lie in [0, 1]".to_string()));
        }
        if self.age_range.0 > self.age_range.1 || self.age_range.0 < 18 || self.age_range.1 > 100 {
            return Err(Error::Config(format!("bad age range {:?}", self.age_range)));
        }
        Ok(())
    }
}

/// Independent stream per (seed, record, purpose).
pub fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    // splitmix64 over a combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(stream.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Draw {
    demo: Demographics,
    params: BlowParams,
    invalid: bool,
}

fn draw_subject(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> Draw {
    let age = rng.random_range(spec.age_range.0..=spec.age_range.1);
    let sex = u8::from(rng.random_bool(0.5));
    let smoking = u8::from(rng.random_bool(spec.smoking_rate));
    let (h_mean, h_sd): (f64, f64) = if sex == 1 { (176.0, 7.0) } else { (163.0, 6.5) };
    let height = Normal::new(h_mean, h_sd)
        .expect("positive sd")
        .sample(rng)
        .round()
        .clamp(145.0, 205.0) as u32;
    let h_m = height as f64 / 100.0;
    let predicted = if sex == 1 {
        5.76 * h_m - 0.026 * age as f64 - 4.34
    } else {
        4.43 * h_m - 0.026 * age as f64 - 2.89
    };
    let spread = Normal::new(0.0, spec.fvc_log_sd.max(0.0) + 1e-12)
        .expect("positive sd")
        .sample(rng);
    let fvc = (predicted.max(1.2) * spread.exp()).clamp(1.2, 7.5);
    let pef = (fvc * rng.random_range(spec.pef_per_fvc.0..=spec.pef_per_fvc.1)).clamp(2.0, 14.0);
    let scoop = match &spec.scoop {
        ScoopDistribution::Uniform { low, high } => rng.random_range(*low..=*high),
        ScoopDistribution::Choice { values } => values[rng.random_range(0..values.len())],
    };
    // keep rise and peak hold within the first 40% of FVC
    let rise = rng
        .random_range(spec.rise_time_s.0..=spec.rise_time_s.1)
        .min(2.0 * (0.4 * fvc / pef - PEAK_HOLD_S).max(0.02));
    let invalid = spec.invalid_fraction > 0.0 && rng.random_bool(spec.invalid_fraction);
    Draw {
        demo: Demographics {
            age,
            sex,
            smoking,
            height,
        },
        params: BlowParams {
            fvc_liters: fvc,
            pef_lps: pef,
            scoop,
            rise_time_s: rise,
            noise_sd: spec.noise_sd,
            duration_s: spec.duration_s,
        },
        invalid,
    }
}

fn risk_score(w: &RiskWeights, d: &Draw) -> f64 {
    w.scoop * (d.params.scoop - 0.5)
        + w.fvc * (d.params.fvc_liters - 4.0)
        + w.pef * (d.params.pef_lps - 8.0)
        + w.age * (d.demo.age as f64 - 55.0) / 10.0
        + w.smoking * d.demo.smoking as f64
        + w.sex * d.demo.sex as f64
        + w.height * (d.demo.height as f64 - 170.0) / 10.0
}

/// Intercept `b` with `mean(sigmoid(b + score)) == prevalence`.
fn solve_intercept(scores: &[f64], prevalence: f64) -> f64 {
    let mean_p = |b: f64| {
        scores
            .iter()
            .map(|s| crate::tensorcore::sigmoid(b + s))
            .sum::<f64>()
            / scores.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draw `n` labelled subjects. Deterministic in `seed`; records are generated
/// from per-record derived seeds so the work can run in parallel.
pub fn generate_cohort(n: usize, spec: &CohortSpec, seed: u64) -> Result<Vec<CohortRecord>> {
    if n == 0 {
        return Err(Error::Config("cohort size must be at least 1".to_string()));
    }
    spec.validate()?;
    let draws: Vec<Draw> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
            draw_subject(spec, &mut rng)
        })
        .collect();

    let mut labels = vec![EndpointLabels::default(); n];
    for (e_idx, endpoint) in Endpoint::ALL.into_iter().enumerate() {
        match spec.rule(endpoint) {
            LabelRule::Deterministic { threshold } => {
                for (l, d) in labels.iter_mut().zip(&draws) {
                    l.set(endpoint, u8::from(d.params.scoop > *threshold));
                }
            }
            LabelRule::Probabilistic {
                prevalence,
                weights,
            } => {
                let scores: Vec<f64> = draws.iter().map(|d| risk_score(weights, d)).collect();
                let b = solve_intercept(&scores, *prevalence);
                for (i, (l, s)) in labels.iter_mut().zip(&scores).enumerate() {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 1 + e_idx as u64));
                    let p = crate::tensorcore::sigmoid(b + s);
                    l.set(endpoint, u8::from(rng.random::<f64>() < p));
                }
            }
        }
    }

    draws
        .into_par_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (d, l))| {
            let mut blow = synth_volume_curve(&d.params, derive_seed(seed, i as u64, 10))?;
            if d.invalid {
                blow.acceptability_code = 7;
            }
            Ok(CohortRecord {
                id: format!("S{seed}-{i:06}"),
                volume_ml: blow.volume_ml,
                age: d.demo.age,
                sex: d.demo.sex,
                smoking: d.demo.smoking,
                height_cm: d.demo.height,
                copd_risk: l.copd_risk,
                mortality: l.mortality,
                exacerbation: l.exacerbation,
                blow_params: d.params,
                acceptability_code: blow.acceptability_code,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(scoop: f64, noise: f64) -> BlowParams {
        BlowParams {
            fvc_liters: 4.0,
            pef_lps: 8.0,
            scoop,
            rise_time_s: 0.15,
            noise_sd: noise,
            duration_s: 6.0,
        }
    }

    #[test]
    fn noiseless_blow_ends_at_fvc() {
        let b = synth_volume_curve(&params(0.6, 0.0), 3).unwrap();
        assert_eq!(*b.volume_ml.last().unwrap(), 4000);
        assert_eq!(b.volume_ml.len(), 601);
    }

    #[test]
    fn straight_limb_without_scoop() {
        let m = BlowModel::new(params(0.0, 0.0)).unwrap();
        let v0 = m.limb_start_volume();
        let v1 = 4.0;
        let (f0, f1) = (m.descending_flow_at_volume(v0), m.descending_flow_at_volume(v1));
        let max_dev = (0..=1000)
            .map(|k| {
                let v = v0 + (v1 - v0) * k as f64 / 1000.0;
                let chord = f0 + (f1 - f0) * (v - v0) / (v1 - v0);
                (m.descending_flow_at_volume(v) - chord).abs()
            })
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-6, "{max_dev}");
    }

    #[test]
    fn scoop_deepens_concavity() {
        // mid-limb flow sag below the chord grows with scoop
        let sag = |s: f64| {
            let m = BlowModel::new(params(s, 0.0)).unwrap();
            let (v0, v1) = (m.limb_start_volume(), 4.0);
            let vm = 0.5 * (v0 + v1);
            let chord = 0.5 * (m.descending_flow_at_volume(v0) + m.descending_flow_at_volume(v1));
            chord - m.descending_flow_at_volume(vm)
        };
        let s: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&x| sag(x)).collect();
        assert!(s[0].abs() < 1e-9);
        assert!(s.windows(2).all(|w| w[1] > w[0]), "{s:?}");
    }

    #[test]
    fn flow_peaks_at_rise_time() {
        let m = BlowModel::new(params(0.4, 0.0)).unwrap();
        assert!((m.flow_at(0.15) - 8.0).abs() < 1e-12);
        // first time the maximum is reached
        let peak_t = (0..600)
            .map(|i| i as f64 * 0.001)
            .fold((0.0, f64::NEG_INFINITY), |(bt, bf), t| {
                let f = m.flow_at(t);
                if f > bf + 1e-12 { (t, f) } else { (bt, bf) }
            })
            .0;
        assert!((peak_t - 0.15).abs() < 2e-3, "{peak_t}");
        assert!(m.flow_at(0.15 + PEAK_HOLD_S + 0.05) < 8.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params(0.5, 0.0);
        p.fvc_liters = 9.0;
        assert!(matches!(synth_volume_curve(&p, 1), Err(Error::Param(_))));
        let mut p = params(0.5, 0.0);
        p.rise_time_s = 7.0;
        assert!(synth_volume_curve(&p, 1).is_err());
        let mut p = params(1.5, 0.0);
        p.scoop = 1.5;
        assert!(synth_volume_curve(&p, 1).is_err());
    }

    #[test]
    fn seeds_differ_within_noise_bound() {
        // truncation at ±2 sd bounds the pairwise gap by 4 sd, plus 1 mL of rounding
        let p = params(0.5, 0.01);
        let bound_ml = 4.0 * p.noise_sd * 1000.0 + 1.0;
        let mut worst = 0.0f64;
        for pair in 0..1000u64 {
            let a = synth_volume_curve(&p, 2 * pair + 1).unwrap();
            let b = synth_volume_curve(&p, 2 * pair + 2).unwrap();
            for (x, y) in a.volume_ml.iter().zip(&b.volume_ml) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
        assert!(worst <= bound_ml, "worst gap {worst} mL > {bound_ml}");
        assert!(worst > 0.0);
    }

    #[test]
    fn cohort_size_and_zero_error() {
        assert!(matches!(
            generate_cohort(0, &CohortSpec::default(), 1),
            Err(Error::Config(_))
        ));
        let c = generate_cohort(5, &CohortSpec::default(), 1).unwrap();
        assert_eq!(c.len(), 5);
        let ids: std::collections::HashSet<_> = c.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn unsatisfiable_prevalence() {
        let mut spec = CohortSpec::default();
        spec.mortality = LabelRule::Probabilistic {
            prevalence: 1.0,
            weights: RiskWeights::default(),
        };
        assert!(matches!(generate_cohort(10, &spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_labels_follow_scoop() {
        let spec = CohortSpec {
            scoop: ScoopDistribution::Choice {
                values: vec![0.2, 0.8],
            },
            ..CohortSpec::planted_scoop()
        };
        let c = generate_cohort(100, &spec, 11).unwrap();
        let high = c.iter().filter(|r| r.blow_params.scoop == 0.8).count();
        let pos = c.iter().filter(|r| r.copd_risk == 1).count();
        assert_eq!(pos, high);
        assert!(c.iter().all(|r| (r.copd_risk == 1) == (r.blow_params.scoop > 0.5)));
    }

    #[test]
    fn cohort_is_deterministic() {
        let a = generate_cohort(20, &CohortSpec::default(), 9).unwrap();
        let b = generate_cohort(20, &CohortSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(20, &CohortSpec::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ndjson_field_names() {
        let c = generate_cohort(1, &CohortSpec::default(), 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&c[0]).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "age",
                "blow_params",
                "copd_risk",
                "exacerbation",
                "height_cm",
                "id",
                "mortality",
                "sex",
                "smoking",
                "volume_ml"
            ]
        );
    }
}
