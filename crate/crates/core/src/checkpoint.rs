//! Checkpoint container for a fitted trial: tensors in the payload, everything else in the manifest.

use crate::baselines::{InputKind, MlpBaseline, PlattScaling};
use crate::container;
use crate::error::{Error, Result};
use crate::fusion::{DemographicScaling, FusionSource, GbdtEnsemble, DEMOGRAPHIC_WIDTH};
use crate::model::{History, ModelParams, WeightsOf};
use crate::pipeline::{PipelineConfig, TrialModel};
use crate::preproc::{PreprocConfig, Standardizer};
use crate::synthdata::Endpoint;
use crate::tensorcore::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F64,
    /// Halves the file; loading widens back to f64.
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    dtype: Dtype,
    endpoint: Endpoint,
    seed: u64,
    config: PipelineConfig,
    preproc: PreprocConfig,
    max_patches: usize,
    history: History,
    gbdt: GbdtEnsemble,
    demo_scaling: Option<DemographicScaling>,
    ratio_calibration: PlattScaling,
    test_ids: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(m: &TrialModel) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = m
        .transformer
        .weights
        .named()
        .into_iter()
        .map(|(n, t)| (format!("transformer.{n}"), t))
        .collect();
    for (prefix, mlp) in [("mlp_summary", &m.mlp_summary), ("mlp_demographic", &m.mlp_demographic)] {
        out.extend(mlp.named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }
    out
}

pub fn to_bytes(m: &TrialModel, dtype: Dtype) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    let std_mean = Tensor::vector(m.standardizer.mean.clone());
    let std_sd = Tensor::vector(m.standardizer.sd.clone());
    let mut all = named_tensors(m);
    all.push(("standardizer.mean".to_string(), &std_mean));
    all.push(("standardizer.sd".to_string(), &std_sd));
    for (name, t) in all {
        let offset = payload.len();
        for &v in t.data() {
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_VERSION,
        dtype,
        endpoint: m.endpoint,
        seed: m.seed,
        config: m.config.clone(),
        preproc: m.preproc,
        max_patches: m.transformer.max_patches(),
        history: m.history.clone(),
        gbdt: m.gbdt.clone(),
        demo_scaling: m.demo_scaling.clone(),
        ratio_calibration: m.ratio_calibration,
        test_ids: m.test_ids.clone(),
        tensors: entries,
    };
    Ok(container::encode(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &serde_json::to_value(&manifest)?,
        &payload,
    ))
}

struct TensorTable<'a> {
    entries: HashMap<String, TensorEntry>,
    payload: &'a [u8],
    dtype: Dtype,
}

impl TensorTable<'_> {
    fn take(&mut self, name: &str, expected: Option<&[usize]>) -> Result<Tensor> {
        let e = self
            .entries
            .remove(name)
            .ok_or_else(|| Error::Schema(format!("checkpoint is missing tensor {name}")))?;
        if let Some(shape) = expected {
            if e.shape != shape {
                return Err(Error::Schema(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    e.shape, shape
                )));
            }
        }
        let count: usize = e.shape.iter().product();
        let w = self.dtype.width();
        if e.len != count * w || e.offset + e.len > self.payload.len() {
            return Err(Error::Schema(format!(
                "tensor {name} spans {} bytes at {}, shape needs {}",
                e.len,
                e.offset,
                count * w
            )));
        }
        let bytes = &self.payload[e.offset..e.offset + e.len];
        let data: Vec<f64> = match self.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("tensor {name} holds a non-finite value at {i}")));
        }
        Tensor::new(e.shape, data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrialModel> {
    let (manifest, payload) = container::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let manifest: Manifest = serde_json::from_value(manifest)
        .map_err(|e| Error::Schema(format!("checkpoint manifest: {e}")))?;
    manifest
        .config
        .model
        .validate()
        .map_err(|e| Error::Schema(format!("checkpoint config: {e}")))?;
    let mut table = TensorTable {
        entries: HashMap::new(),
        payload,
        dtype: manifest.dtype,
    };
    for e in &manifest.tensors {
        if table.entries.insert(e.name.clone(), e.clone()).is_some() {
            return Err(Error::Schema(format!("tensor {} appears twice", e.name)));
        }
    }

    // Shapes come from a freshly initialized model with the stored config.
    let template = ModelParams::init(&manifest.config.model, manifest.max_patches)?;
    let shapes: WeightsOf<Vec<usize>> = template.weights.map(|t| t.shape().to_vec());
    let mut values = HashMap::new();
    for (name, shape) in shapes.named() {
        let t = table.take(&format!("transformer.{name}"), Some(shape))?;
        values.insert(name, t);
    }
    let mut weights = template.weights;
    for ((name, _), slot) in shapes.named().into_iter().zip(weights.values_mut()) {
        *slot = values.remove(&name).expect("every name was loaded");
    }
    let transformer = ModelParams {
        heads: manifest.config.model.heads,
        weights,
    };

    let mut mlp = |kind: InputKind, prefix: &str| {
        MlpBaseline::from_named(kind, |n| table.take(&format!("{prefix}.{n}"), None))
            .map_err(|e| Error::Schema(format!("{prefix}: {e}")))
    };
    let mlp_summary = mlp(InputKind::SummaryStats, "mlp_summary")?;
    let mlp_demographic = mlp(InputKind::Demographic, "mlp_demographic")?;

    let t = transformer.max_patches() * transformer.patch_len();
    if manifest.preproc.patch_len != transformer.patch_len() || manifest.preproc.padded_len() != t {
        return Err(Error::Schema(format!(
            "preprocessing grid (T={}, P={}) does not match the model (T={t}, P={})",
            manifest.preproc.padded_len(),
            manifest.preproc.patch_len,
            transformer.patch_len()
        )));
    }
    let mean = table.take("standardizer.mean", None)?;
    let sd = table.take("standardizer.sd", None)?;
    for (name, v) in [("standardizer.mean", &mean), ("standardizer.sd", &sd)] {
        if v.shape() != [t] {
            return Err(Error::Schema(format!(
                "tensor {name} has shape {:?}, config implies [{t}]",
                v.shape()
            )));
        }
    }
    if let Some(i) = sd.data().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Schema(format!("standardizer.sd[{i}] is not positive")));
    }
    if let Some(name) = table.entries.keys().next() {
        return Err(Error::Schema(format!("unexpected tensor {name}")));
    }
    let fused_width = match manifest.config.fusion_source {
        FusionSource::Cls => transformer.d_embed(),
        FusionSource::Initial => 1,
    } + DEMOGRAPHIC_WIDTH;
    if manifest.gbdt.n_features != fused_width {
        return Err(Error::Schema(format!(
            "gbdt expects {} features, fusion produces {fused_width}",
            manifest.gbdt.n_features
        )));
    }
    let gbdt = GbdtEnsemble::from_json(&serde_json::to_string(&manifest.gbdt)?)?;

    Ok(TrialModel {
        endpoint: manifest.endpoint,
        seed: manifest.seed,
        config: manifest.config,
        preproc: manifest.preproc,
        standardizer: Standardizer {
            mean: mean.data().to_vec(),
            sd: sd.data().to_vec(),
        },
        transformer,
        history: manifest.history,
        gbdt,
        demo_scaling: manifest.demo_scaling,
        ratio_calibration: manifest.ratio_calibration,
        mlp_summary,
        mlp_demographic,
        test_ids: manifest.test_ids,
    })
}

pub fn save(m: &TrialModel, path: &Path, dtype: Dtype) -> Result<()> {
    container::write_atomic(path, &to_bytes(m, dtype)?)
}

pub fn load(path: &Path) -> Result<TrialModel> {
    from_bytes(&container::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::preprocess_cohort;
    use crate::pipeline::fit_trial;
    use crate::preproc::PreprocConfig;
    use crate::synthdata::{generate_cohort, CohortSpec};

    fn tiny_trial() -> (crate::dataset::Dataset, TrialModel) {
        let records = generate_cohort(60, &CohortSpec::default(), 4).unwrap();
        let (ds, _) = preprocess_cohort(&records, &PreprocConfig::default()).unwrap();
        let mut cfg = PipelineConfig::desk();
        cfg.model.d_embed = 8;
        cfg.model.layers = 1;
        cfg.model.head_hidden = 4;
        cfg.model.epochs = 1;
        cfg.mlp.epochs = 2;
        cfg.gbdt.rounds = 3;
        let m = fit_trial(&ds, Endpoint::CopdRisk, &cfg, 2).unwrap();
        (ds, m)
    }

    #[test]
    fn round_trip_is_exact_in_f64() {
        let (ds, m) = tiny_trial();
        let back = from_bytes(&to_bytes(&m, Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.evaluate(&ds).unwrap(), m.evaluate(&ds).unwrap());
        let narrow = from_bytes(&to_bytes(&m, Dtype::F32).unwrap()).unwrap();
        let a = m.transformer.weights.w_proj.data();
        let b = narrow.transformer.weights.w_proj.data();
        assert!(a.iter().zip(b).all(|(x, y)| (*x as f32) as f64 == *y));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let (_, mut m) = tiny_trial();
        m.config.model.head_hidden = 5;
        let err = from_bytes(&to_bytes(&m, Dtype::F64).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("transformer.head1_w"), "{err}");
    }
}
