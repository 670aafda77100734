//! Cohort → preprocessed dataset, its binary container, and per-trial preparation.

use crate::container;
use crate::error::{Error, Result};
use crate::model::split_indices;
use crate::preproc::{
    blow_to_curve, compute_summary, fit_standardizer, patchify, qc_filter, validate_blow,
    FlowVolumeCurve, PatchSequence, PreprocConfig, SpiroSummary, Standardizer,
};
use crate::synthdata::{CohortRecord, Demographics, Endpoint, EndpointLabels};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::BufRead;
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"SPDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub demographics: Demographics,
    pub labels: EndpointLabels,
    pub summary: SpiroSummary,
    pub valid_len: usize,
}

/// Preprocessed curves plus per-record metadata; curves are unstandardized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: PreprocConfig,
    pub meta: Vec<RecordMeta>,
    pub curves: Vec<FlowVolumeCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub input: usize,
    pub kept: usize,
    pub invalid_code: Vec<String>,
    pub failed: Vec<DroppedRecord>,
    pub qc_dropped: Vec<String>,
}

/// Read a cohort NDJSON file; blank lines are ignored.
pub fn read_cohort(path: &Path) -> Result<Vec<CohortRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CohortRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn cohort_to_ndjson(records: &[CohortRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Validity filter, summaries, tail QC and curve construction.
pub fn preprocess_cohort(
    records: &[CohortRecord],
    cfg: &PreprocConfig,
) -> Result<(Dataset, PreprocessReport)> {
    let mut report = PreprocessReport {
        input: records.len(),
        ..PreprocessReport::default()
    };
    let processed: Vec<Option<Result<(SpiroSummary, FlowVolumeCurve)>>> = records
        .par_iter()
        .map(|r| {
            if !validate_blow(r.acceptability_code) {
                return None;
            }
            let blow = r.blow();
            Some(compute_summary(&blow).and_then(|s| Ok((s, blow_to_curve(&blow, cfg)?))))
        })
        .collect();
    let mut survivors = Vec::new();
    for (r, p) in records.iter().zip(processed) {
        match p {
            None => report.invalid_code.push(r.id.clone()),
            Some(Err(e)) => report.failed.push(DroppedRecord {
                id: r.id.clone(),
                reason: e.to_string(),
            }),
            Some(Ok((s, c))) => survivors.push((r, s, c)),
        }
    }
    if survivors.is_empty() {
        return Err(Error::Degenerate(
            "no record survived validity checks".to_string(),
        ));
    }
    let summaries: Vec<SpiroSummary> = survivors.iter().map(|(_, s, _)| *s).collect();
    let keep = qc_filter(&summaries)?;
    let mut kept = vec![false; survivors.len()];
    for i in keep {
        kept[i] = true;
    }
    let mut meta = Vec::new();
    let mut curves = Vec::new();
    for ((r, s, c), k) in survivors.into_iter().zip(kept) {
        if !k {
            report.qc_dropped.push(r.id.clone());
            continue;
        }
        meta.push(RecordMeta {
            id: r.id.clone(),
            demographics: r.demographics(),
            labels: r.labels(),
            summary: s,
            valid_len: c.valid_len,
        });
        curves.push(c);
    }
    report.kept = meta.len();
    Ok((
        Dataset {
            config: *cfg,
            meta,
            curves,
        },
        report,
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn labels(&self, endpoint: Endpoint) -> Vec<u8> {
        self.meta.iter().map(|m| m.labels.get(endpoint)).collect()
    }

    pub fn curve_len(&self) -> usize {
        self.curves.first().map_or(self.config.padded_len(), |c| c.len())
    }

    /// Container bytes; curves stored as 32-bit floats.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = self.curve_len();
        let mut payload = Vec::with_capacity(self.curves.len() * t * 4);
        for c in &self.curves {
            if c.len() != t {
                return Err(Error::Shape(format!("curve of length {} in a T={t} dataset", c.len())));
            }
            for &v in &c.flow_lps {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let curve_bytes = payload.len();
        payload.extend_from_slice(&serde_json::to_vec(&self.meta)?);
        let manifest = json!({
            "schema_version": DATASET_VERSION,
            "t": t,
            "patch_len": self.config.patch_len,
            "dv_l": self.config.dv_l,
            "t_max": self.config.t_max,
            "sigma": self.config.sigma,
            "n": self.curves.len(),
            "curve_dtype": "f32le",
            "curve_block": {"offset": 0, "len": curve_bytes},
            "meta_block": {"offset": curve_bytes, "len": payload.len() - curve_bytes},
            // fitted per trial on its training split and stored with the model
            "standardizer": null,
        });
        Ok(container::encode(DATASET_MAGIC, DATASET_VERSION, &manifest, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = container::decode(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let field = |k: &str| {
            manifest
                .get(k)
                .ok_or_else(|| Error::Schema(format!("dataset manifest lacks {k:?}")))
        };
        let as_usize = |k: &str| -> Result<usize> {
            field(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Schema(format!("dataset manifest {k:?} is not an integer")))
        };
        let as_f64 = |k: &str| -> Result<f64> {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::Schema(format!("dataset manifest {k:?} is not a number")))
        };
        let (t, n) = (as_usize("t")?, as_usize("n")?);
        let config = PreprocConfig {
            dv_l: as_f64("dv_l")?,
            t_max: as_usize("t_max")?,
            patch_len: as_usize("patch_len")?,
            sigma: as_f64("sigma")?,
        };
        let curve_bytes = n * t * 4;
        if payload.len() < curve_bytes {
            return Err(Error::Schema(format!(
                "curve block holds {} bytes, manifest implies {curve_bytes}",
                payload.len()
            )));
        }
        let meta: Vec<RecordMeta> = serde_json::from_slice(&payload[curve_bytes..])
            .map_err(|e| Error::Schema(format!("dataset metadata: {e}")))?;
        if meta.len() != n {
            return Err(Error::Schema(format!(
                "{} metadata rows for {n} curves",
                meta.len()
            )));
        }
        let curves = payload[..curve_bytes]
            .chunks_exact(t * 4)
            .zip(&meta)
            .map(|(chunk, m)| {
                let flow_lps: Vec<f64> = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                if m.valid_len > t {
                    return Err(Error::Schema(format!(
                        "record {} has valid_len {} > T {t}",
                        m.id, m.valid_len
                    )));
                }
                Ok(FlowVolumeCurve {
                    flow_lps,
                    valid_len: m.valid_len,
                    dv_l: config.dv_l,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            config,
            meta,
            curves,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// One trial's split, training-fit standardizer and model inputs for every record.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub standardizer: Standardizer,
    pub seqs: Vec<PatchSequence>,
}

pub fn standardize_all(
    ds: &Dataset,
    standardizer: &Standardizer,
) -> Result<Vec<PatchSequence>> {
    ds.curves
        .par_iter()
        .map(|c| patchify(&standardizer.apply(c)?, ds.config.patch_len))
        .collect()
}

pub fn prepare_trial(ds: &Dataset, split: [f64; 3], seed: u64) -> Result<TrialData> {
    let [train, val, test] = split_indices(ds.len(), split, seed)?;
    let fit: Vec<&FlowVolumeCurve> = train.iter().map(|&i| &ds.curves[i]).collect();
    let standardizer = fit_standardizer(&fit)?;
    let seqs = standardize_all(ds, &standardizer)?;
    Ok(TrialData {
        train,
        val,
        test,
        standardizer,
        seqs,
    })
}

impl TrialData {
    pub fn inputs(&self, idx: &[usize]) -> Vec<&PatchSequence> {
        idx.iter().map(|&i| &self.seqs[i]).collect()
    }
}

pub fn pick<T: Copy>(values: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| values[i]).collect()
}
