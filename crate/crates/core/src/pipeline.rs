//! One trial = one seeded split; every method is fit on its training part and scored on its test part.

use crate::baselines::{ratio_score, train_mlp_baseline, InputKind, MlpBaseline, MlpHyper, PlattScaling};
use crate::dataset::{pick, prepare_trial, standardize_all, Dataset};
use crate::error::{Error, Result};
use crate::eval::{brier, roc_auc, TrialResult};
use crate::fusion::{fuse_features, gbdt_train, DemographicScaling, FusionSource, GbdtEnsemble, GbdtParams};
use crate::model::{predict, predict_batch, train, Examples, History, ModelConfig, ModelParams, Prediction};
use crate::preproc::{blow_to_curve, patchify, PatchSequence, PreprocConfig, Standardizer, VolumeTimeSeries};
use crate::synthdata::{Demographics, Endpoint};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ratio,
    MlpSummary,
    MlpDemographic,
    Transformer,
    TransformerFused,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ratio,
        Method::MlpSummary,
        Method::MlpDemographic,
        Method::Transformer,
        Method::TransformerFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ratio => "ratio",
            Method::MlpSummary => "mlp_summary",
            Method::MlpDemographic => "mlp_demographic",
            Method::Transformer => "transformer",
            Method::TransformerFused => "transformer_fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub mlp: MlpHyper,
    pub gbdt: GbdtParams,
    pub fusion_source: FusionSource,
    /// z-score demographics before fusion instead of passing raw values.
    pub scale_demographics: bool,
}

impl PipelineConfig {
    /// Reduced transformer that trains in minutes on one core.
    pub fn desk() -> Self {
        PipelineConfig {
            model: ModelConfig::desk(),
            ..PipelineConfig::default()
        }
    }
}

/// Everything fit during one trial; this is what a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialModel {
    pub endpoint: Endpoint,
    pub seed: u64,
    pub config: PipelineConfig,
    /// Grid settings of the dataset the model was trained on.
    pub preproc: PreprocConfig,
    pub standardizer: Standardizer,
    pub transformer: ModelParams,
    pub history: History,
    pub gbdt: GbdtEnsemble,
    pub demo_scaling: Option<DemographicScaling>,
    pub ratio_calibration: PlattScaling,
    pub mlp_summary: MlpBaseline,
    pub mlp_demographic: MlpBaseline,
    pub test_ids: Vec<String>,
}

/// Ranking score (for AUC) and probability (for Brier) per record.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub method: Method,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

fn fused_row(
    source: FusionSource,
    pred: &Prediction,
    demo: &Demographics,
    scaling: Option<&DemographicScaling>,
) -> Result<Vec<f64>> {
    match source {
        FusionSource::Cls => fuse_features(&pred.cls_embedding, pred.cls_embedding.len(), demo, scaling),
        FusionSource::Initial => fuse_features(&[pred.logit], 1, demo, scaling),
    }
}

fn features(ds: &Dataset, kind: InputKind, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| kind.features(&ds.meta[i])).collect()
}

fn ratio_scores(ds: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    idx.iter().map(|&i| ratio_score(&ds.meta[i].summary)).collect()
}

/// Fit every method on one seeded split of `ds`.
pub fn fit_trial(ds: &Dataset, endpoint: Endpoint, cfg: &PipelineConfig, seed: u64) -> Result<TrialModel> {
    let trial = prepare_trial(ds, cfg.model.split, seed)?;
    let labels = ds.labels(endpoint);
    let (ytr, yva) = (pick(&labels, &trial.train), pick(&labels, &trial.val));

    let model_cfg = ModelConfig {
        seed,
        ..cfg.model.clone()
    };
    let (tr, va) = (trial.inputs(&trial.train), trial.inputs(&trial.val));
    let (transformer, history) = train(
        &model_cfg,
        Examples {
            inputs: &tr,
            labels: &ytr,
        },
        Examples {
            inputs: &va,
            labels: &yva,
        },
    )?;

    let train_demo: Vec<Demographics> = trial.train.iter().map(|&i| ds.meta[i].demographics).collect();
    let demo_scaling = if cfg.scale_demographics {
        Some(DemographicScaling::fit(&train_demo)?)
    } else {
        None
    };
    let fused: Vec<Vec<f64>> = predict_batch(&transformer, &tr)?
        .iter()
        .zip(&train_demo)
        .map(|(p, d)| fused_row(cfg.fusion_source, p, d, demo_scaling.as_ref()))
        .collect::<Result<_>>()?;
    let gbdt = gbdt_train(&fused, &ytr, &cfg.gbdt)?;

    let ratio_calibration = PlattScaling::fit(&ratio_scores(ds, &trial.train)?, &ytr)?;
    let mlp = |kind: InputKind| {
        let hyper = MlpHyper {
            seed,
            ..cfg.mlp.clone()
        };
        train_mlp_baseline(
            kind,
            &features(ds, kind, &trial.train),
            &ytr,
            &features(ds, kind, &trial.val),
            &yva,
            &hyper,
        )
    };
    let mlp_summary = mlp(InputKind::SummaryStats)?;
    let mlp_demographic = mlp(InputKind::Demographic)?;

    Ok(TrialModel {
        endpoint,
        seed,
        config: cfg.clone(),
        preproc: ds.config,
        standardizer: trial.standardizer,
        transformer,
        history,
        gbdt,
        demo_scaling,
        ratio_calibration,
        mlp_summary,
        mlp_demographic,
        test_ids: trial.test.iter().map(|&i| ds.meta[i].id.clone()).collect(),
    })
}

impl TrialModel {
    /// Dataset rows of the held-out records, looked up by id.
    pub fn test_indices(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let by_id: HashMap<&str, usize> = ds.meta.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect();
        self.test_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Schema(format!("test record {id:?} is not in the dataset")))
            })
            .collect()
    }

    /// Standardized model inputs for the given rows.
    pub fn sequences(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<PatchSequence>> {
        let all = standardize_all(ds, &self.standardizer)?;
        Ok(idx.iter().map(|&i| all[i].clone()).collect())
    }

    pub fn score(&self, ds: &Dataset, idx: &[usize], methods: &[Method]) -> Result<Vec<MethodScores>> {
        let needs_transformer = methods
            .iter()
            .any(|m| matches!(m, Method::Transformer | Method::TransformerFused));
        let preds = if needs_transformer {
            let seqs = self.sequences(ds, idx)?;
            let refs: Vec<&PatchSequence> = seqs.iter().collect();
            predict_batch(&self.transformer, &refs)?
        } else {
            Vec::new()
        };
        methods
            .iter()
            .map(|&method| {
                let (scores, probabilities) = match method {
                    Method::Ratio => {
                        let s = ratio_scores(ds, idx)?;
                        let p = s.iter().map(|&v| self.ratio_calibration.apply(v)).collect();
                        (s, p)
                    }
                    Method::MlpSummary | Method::MlpDemographic => {
                        let m = if method == Method::MlpSummary {
                            &self.mlp_summary
                        } else {
                            &self.mlp_demographic
                        };
                        let p = m.predict_many(&features(ds, m.kind, idx))?;
                        (p.clone(), p)
                    }
                    Method::Transformer => (
                        preds.iter().map(|p| p.logit).collect(),
                        preds.iter().map(|p| p.probability).collect(),
                    ),
                    Method::TransformerFused => {
                        let mut s = Vec::with_capacity(idx.len());
                        let mut p = Vec::with_capacity(idx.len());
                        for (pred, &i) in preds.iter().zip(idx) {
                            let row = fused_row(
                                self.config.fusion_source,
                                pred,
                                &ds.meta[i].demographics,
                                self.demo_scaling.as_ref(),
                            )?;
                            let m = self.gbdt.margin(&row)?;
                            s.push(m);
                            p.push(crate::tensorcore::sigmoid(m));
                        }
                        (s, p)
                    }
                };
                Ok(MethodScores {
                    method,
                    scores,
                    probabilities,
                })
            })
            .collect()
    }

    /// Preprocess, standardize and patch one raw blow the way training data was.
    pub fn sequence_for_blow(&self, blow: &VolumeTimeSeries) -> Result<PatchSequence> {
        let curve = blow_to_curve(blow, &self.preproc)?;
        patchify(&self.standardizer.apply(&curve)?, self.preproc.patch_len)
    }

    /// Transformer prediction plus, when demographics are given, the fused probability.
    pub fn predict_sequence(
        &self,
        seq: &PatchSequence,
        demo: Option<&Demographics>,
    ) -> Result<(Prediction, Option<f64>)> {
        let pred = predict(&self.transformer, seq)?;
        let fused = match demo {
            Some(d) => {
                let row = fused_row(self.config.fusion_source, &pred, d, self.demo_scaling.as_ref())?;
                Some(self.gbdt.predict(&row)?)
            }
            None => None,
        };
        Ok((pred, fused))
    }

    /// Test-split metrics for every method.
    pub fn evaluate(&self, ds: &Dataset) -> Result<Vec<TrialResult>> {
        let idx = self.test_indices(ds)?;
        let labels = pick(&ds.labels(self.endpoint), &idx);
        self.score(ds, &idx, &Method::ALL)?
            .into_iter()
            .map(|s| {
                Ok(TrialResult {
                    endpoint: self.endpoint,
                    method: s.method.name().to_string(),
                    auc: roc_auc(&s.scores, &labels)?,
                    brier: brier(&s.probabilities, &labels)?,
                    seed: self.seed,
                })
            })
            .collect()
    }
}
