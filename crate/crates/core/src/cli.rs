//! The `spiro` command line.
//!
//! Every failure prints one JSON object on stderr and maps to an exit code:
//! 2 for usage and configuration errors, 3 for data and schema errors, 4 for I/O.

use crate::checkpoint::{self, Dtype};
use crate::container::{read_file, sha256_hex, write_atomic};
use crate::dataset::{cohort_to_ndjson, preprocess_cohort, read_cohort, Dataset};
use crate::error::Error;
use crate::eval::{to_csv, trial_aggregate, TrialResult};
use crate::fusion::FusionSource;
use crate::interpret::{
    cls_attention_profile, cohort_mean_curve, cohort_mean_profile, gold_stratify, locate_markers,
    overlay_export, Aggregation, AttentionProfile, MarkerSet, ReferenceEquation,
};
use crate::labels::{map_records, LabelRuleset, PatientRecords};
use crate::model::forward;
use crate::pipeline::{fit_trial, PipelineConfig, TrialModel};
use crate::preproc::{FlowVolumeCurve, PreprocConfig};
use crate::synthdata::{generate_cohort, CohortSpec, Endpoint};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Crate version plus `git describe` of the build tree.
pub const VERSION: &str = env!("SPIRO_VERSION");

#[derive(Parser, Debug)]
#[command(name = "spiro", version = VERSION, about = "Spirogram endpoint models: synthesize, preprocess, train, evaluate, explain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort as NDJSON.
    Synth(SynthArgs),
    /// Turn a cohort into a flow-volume dataset container.
    Preprocess(PreprocessArgs),
    /// Fit every method for each endpoint and seed; one checkpoint per pair.
    Train(TrainArgs),
    /// Score checkpoints on their held-out splits and write the metrics table.
    Eval(EvalArgs),
    /// CLS-attention overlays per GOLD cohort.
    Explain(ExplainArgs),
    /// Derive endpoint labels from coded medical records.
    Label(LabelArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON overrides for the cohort specification.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dv: Option<f64>,
    #[arg(long)]
    tmax: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EndpointArg {
    #[value(name = "copd_risk")]
    CopdRisk,
    #[value(name = "mortality")]
    Mortality,
    #[value(name = "exacerbation")]
    Exacerbation,
    #[value(name = "all")]
    All,
}

fn endpoints(args: &[EndpointArg]) -> Vec<Endpoint> {
    let mut out = Vec::new();
    for a in args {
        let add: &[Endpoint] = match a {
            EndpointArg::CopdRisk => &[Endpoint::CopdRisk],
            EndpointArg::Mortality => &[Endpoint::Mortality],
            EndpointArg::Exacerbation => &[Endpoint::Exacerbation],
            EndpointArg::All => &Endpoint::ALL,
        };
        for e in add {
            if !out.contains(e) {
                out.push(*e);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Cls,
    Initial,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DtypeArg {
    F64,
    F32,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    endpoint: Vec<EndpointArg>,
    #[arg(long)]
    data: PathBuf,
    /// Pipeline configuration JSON; fields left out keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Start from the reduced single-core preset instead of the full-size defaults.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    gbdt_rounds: Option<usize>,
    #[arg(long)]
    fusion_source: Option<FusionArg>,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    endpoint: Vec<EndpointArg>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint files or directories holding them.
    #[arg(long, required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StratifyArg {
    Gold,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggregationArg {
    MeanThenSoftmax,
    SoftmaxThenMean,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "gold")]
    stratify: StratifyArg,
    /// Reference-equation JSON for predicted FEV1.
    #[arg(long)]
    ref_eq: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    subset: SubsetArg,
    #[arg(long, value_enum, default_value = "mean-then-softmax")]
    aggregation: AggregationArg,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// NDJSON, one participant with records per line.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => exit_code(e),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Param(_) | Error::Config(_) => 2,
        Error::Io { .. } => 4,
        _ => 3,
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            report(&CliError::Usage(first.trim_start_matches("error: ").to_string()));
            return 2;
        }
    };
    let mut args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    if let Some(first) = args.first_mut() {
        *first = "spiro".to_string();
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a, &args),
        Command::Preprocess(a) => preprocess(a, &args),
        Command::Train(a) => train(a, &args),
        Command::Eval(a) => eval(a, &args),
        Command::Explain(a) => explain(a, &args),
        Command::Label(a) => label(a, &args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            e.code()
        }
    }
}

fn report(e: &CliError) {
    let line = json!({"error": e.kind(), "exit_code": e.code(), "message": e.to_string()});
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn stdout_line(v: &Value) {
    let _ = writeln!(std::io::stdout(), "{v}");
}

/// Deep-merge `over` into `base`: objects merge key by key, anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// `defaults` overlaid with the JSON file, if any. Returns the file's JSON too.
fn layered<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>) -> CliResult<(T, Value)> {
    let Some(path) = file else {
        return Ok((defaults, Value::Null));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let over: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(&defaults)?;
    merge(&mut base, over.clone());
    let cfg = serde_json::from_value(base)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, over))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'static str,
    argv: &'a [String],
    config: Value,
    seeds: Vec<u64>,
    /// sha256 of every input file.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Value::is_null")]
    details: Value,
}

fn hash_inputs(paths: &[&Path]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.display().to_string(), sha256_hex(&read_file(p)?));
    }
    Ok(out)
}

fn write_manifest(path: &Path, m: &RunManifest<'_>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn synth(a: SynthArgs, argv: &[String]) -> CliResult<()> {
    let (spec, _) = layered(CohortSpec::default(), a.spec.as_deref())?;
    let records = generate_cohort(a.n, &spec, a.seed)?;
    write_atomic(&a.out, cohort_to_ndjson(&records)?.as_bytes())?;
    let mut inputs = Vec::new();
    if let Some(p) = &a.spec {
        inputs.push(p.as_path());
    }
    write_manifest(
        &sibling(&a.out, ".manifest.json"),
        &RunManifest {
            command: "synth",
            version: VERSION,
            argv,
            config: json!({"n": a.n, "spec": spec}),
            seeds: vec![a.seed],
            inputs: hash_inputs(&inputs)?,
            outputs: vec![a.out.display().to_string()],
            details: Value::Null,
        },
    )?;
    stdout_line(&json!({"records": records.len(), "out": a.out.display().to_string()}));
    Ok(())
}

fn preprocess(a: PreprocessArgs, argv: &[String]) -> CliResult<()> {
    let (mut cfg, _) = layered(PreprocConfig::default(), a.config.as_deref())?;
    if let Some(v) = a.dv {
        cfg.dv_l = v;
    }
    if let Some(v) = a.tmax {
        cfg.t_max = v;
    }
    if let Some(v) = a.patch {
        cfg.patch_len = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    let records = read_cohort(&a.input)?;
    let (ds, report) = preprocess_cohort(&records, &cfg)?;
    ds.save(&a.out)?;
    let mut inputs = vec![a.input.as_path()];
    if let Some(p) = &a.config {
        inputs.push(p.as_path());
    }
    let summary = json!({
        "input": report.input,
        "kept": report.kept,
        "invalid_code": report.invalid_code.len(),
        "failed": report.failed.len(),
        "qc_dropped": report.qc_dropped.len(),
    });
    write_manifest(
        &sibling(&a.out, ".manifest.json"),
        &RunManifest {
            command: "preprocess",
            version: VERSION,
            argv,
            config: serde_json::to_value(cfg)?,
            seeds: Vec::new(),
            inputs: hash_inputs(&inputs)?,
            outputs: vec![a.out.display().to_string()],
            details: serde_json::to_value(&report)?,
        },
    )?;
    stdout_line(&summary);
    Ok(())
}

/// Checkpoint file name for one endpoint and seed.
pub fn checkpoint_name(endpoint: Endpoint, seed: u64) -> String {
    format!("{}_seed{seed}.spfm", endpoint.name())
}

fn train(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let base = if a.desk {
        PipelineConfig::desk()
    } else {
        PipelineConfig::default()
    };
    let (mut cfg, file) = layered(base, a.config.as_deref())?;
    let m = &mut cfg.model;
    if let Some(v) = a.epochs {
        m.epochs = v;
    }
    if let Some(v) = a.lr {
        m.lr = v;
    }
    if let Some(v) = a.d_embed {
        m.d_embed = v;
    }
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.heads {
        m.heads = v;
    }
    if let Some(v) = a.batch_size {
        m.batch_size = v;
    }
    if let Some(v) = a.dropout {
        m.dropout = v;
    }
    if let Some(v) = a.gbdt_rounds {
        cfg.gbdt.rounds = v;
    }
    if let Some(v) = a.fusion_source {
        cfg.fusion_source = match v {
            FusionArg::Cls => FusionSource::Cls,
            FusionArg::Initial => FusionSource::Initial,
        };
    }
    if a.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".to_string()));
    }
    let ds = Dataset::load(&a.data)?;
    if cfg.model.patch_len != ds.config.patch_len {
        if file.pointer("/model/patch_len").is_some() {
            return Err(Error::Schema(format!(
                "model patch_len {} differs from the dataset's patch length {}",
                cfg.model.patch_len, ds.config.patch_len
            ))
            .into());
        }
        cfg.model.patch_len = ds.config.patch_len;
    }
    cfg.model.validate()?;
    let dtype = match a.dtype {
        DtypeArg::F64 => Dtype::F64,
        DtypeArg::F32 => Dtype::F32,
    };
    ensure_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut runs = Vec::new();
    for endpoint in endpoints(&a.endpoint) {
        for &seed in &a.seeds {
            let model = fit_trial(&ds, endpoint, &cfg, seed)?;
            let path = a.out.join(checkpoint_name(endpoint, seed));
            checkpoint::save(&model, &path, dtype)?;
            let h = &model.history;
            let line = json!({
                "endpoint": endpoint.name(),
                "seed": seed,
                "best_epoch": h.best_epoch,
                "val_auc": h.val_auc[h.best_epoch],
                "checkpoint": path.display().to_string(),
            });
            stdout_line(&line);
            runs.push(line);
            outputs.push(path.display().to_string());
        }
    }
    let mut inputs = vec![a.data.as_path()];
    if let Some(p) = &a.config {
        inputs.push(p.as_path());
    }
    write_manifest(
        &a.out.join("train_manifest.json"),
        &RunManifest {
            command: "train",
            version: VERSION,
            argv,
            config: serde_json::to_value(&cfg)?,
            seeds: a.seeds.clone(),
            inputs: hash_inputs(&inputs)?,
            outputs,
            details: Value::Array(runs),
        },
    )?;
    Ok(())
}

fn checkpoint_paths(args: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in args {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "spfm"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs, argv: &[String]) -> CliResult<()> {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".to_string()));
    }
    let ds = Dataset::load(&a.data)?;
    let wanted = endpoints(&a.endpoint);
    let paths = checkpoint_paths(&a.models)?;
    let mut models: BTreeMap<(Endpoint, u64), (PathBuf, TrialModel)> = BTreeMap::new();
    for p in &paths {
        let m = checkpoint::load(p)?;
        if !wanted.contains(&m.endpoint) || !a.seeds.contains(&m.seed) {
            continue;
        }
        let key = (m.endpoint, m.seed);
        if let Some((prev, _)) = models.get(&key) {
            return Err(Error::Schema(format!(
                "{} and {} both hold {} seed {}",
                prev.display(),
                p.display(),
                m.endpoint.name(),
                m.seed
            ))
            .into());
        }
        models.insert(key, (p.clone(), m));
    }
    for &e in &wanted {
        let missing: Vec<u64> = a
            .seeds
            .iter()
            .copied()
            .filter(|s| !models.contains_key(&(e, *s)))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "no trained model for endpoint {} seed{} {}",
                e.name(),
                if missing.len() > 1 { "s" } else { "" },
                missing.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
            ))
            .into());
        }
    }
    let mut results: Vec<TrialResult> = Vec::new();
    for &e in &wanted {
        for &s in &a.seeds {
            results.extend(models[&(e, s)].1.evaluate(&ds)?);
        }
    }
    let rows = trial_aggregate(&results, &a.seeds)?;
    write_atomic(&a.csv, to_csv(&rows).as_bytes())?;
    let used: Vec<&Path> = models.values().map(|(p, _)| p.as_path()).collect();
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(used);
    write_manifest(
        &sibling(&a.csv, ".manifest.json"),
        &RunManifest {
            command: "eval",
            version: VERSION,
            argv,
            config: json!({"endpoints": wanted.iter().map(|e| e.name()).collect::<Vec<_>>()}),
            seeds: a.seeds.clone(),
            inputs: hash_inputs(&inputs)?,
            outputs: vec![a.csv.display().to_string()],
            details: serde_json::to_value(&results)?,
        },
    )?;
    stdout_line(&json!({"rows": rows.len(), "csv": a.csv.display().to_string()}));
    Ok(())
}

/// Per-record attention profiles for the chosen rows.
pub fn record_profiles(
    model: &TrialModel,
    ds: &Dataset,
    idx: &[usize],
    aggregation: Aggregation,
) -> crate::Result<Vec<AttentionProfile>> {
    let seqs = model.sequences(ds, idx)?;
    seqs.par_iter()
        .map(|s| {
            let trace = forward(&model.transformer, s)?;
            cls_attention_profile(&trace.attention, &s.mask, aggregation)
        })
        .collect()
}

/// Cohort-level explanation: mean profile, mean raw curve and its markers.
#[derive(Debug, Clone, Serialize)]
pub struct CohortExplanation {
    pub cohort: String,
    pub n: usize,
    pub profile: AttentionProfile,
    pub markers: MarkerSet,
    pub mean_fvc_l: f64,
    #[serde(skip)]
    pub curve: FlowVolumeCurve,
}

pub fn explain_cohort(
    name: &str,
    ds: &Dataset,
    idx: &[usize],
    profiles: &[AttentionProfile],
) -> crate::Result<CohortExplanation> {
    let profile = cohort_mean_profile(profiles)?;
    let curves: Vec<&FlowVolumeCurve> = idx.iter().map(|&i| &ds.curves[i]).collect();
    let fvc: Vec<f64> = idx.iter().map(|&i| ds.meta[i].summary.fvc_l).collect();
    let (curve, mean_fvc_l) = cohort_mean_curve(&curves, &fvc)?;
    let markers = locate_markers(mean_fvc_l, &curve)?;
    Ok(CohortExplanation {
        cohort: name.to_string(),
        n: idx.len(),
        profile,
        markers,
        mean_fvc_l,
        curve,
    })
}

fn explain(a: ExplainArgs, argv: &[String]) -> CliResult<()> {
    let model = checkpoint::load(&a.model)?;
    let ds = Dataset::load(&a.data)?;
    let (reference, _) = layered(ReferenceEquation::default(), a.ref_eq.as_deref())?;
    let aggregation = match a.aggregation {
        AggregationArg::MeanThenSoftmax => Aggregation::MeanThenSoftmax,
        AggregationArg::SoftmaxThenMean => Aggregation::SoftmaxThenMean,
    };
    let idx = match a.subset {
        SubsetArg::Test => model.test_indices(&ds)?,
        SubsetArg::All => (0..ds.len()).collect(),
    };
    let profiles = record_profiles(&model, &ds, &idx, aggregation)?;
    let mut groups: BTreeMap<String, (Vec<usize>, Vec<AttentionProfile>)> = BTreeMap::new();
    for (&i, p) in idx.iter().zip(profiles) {
        let name = match a.stratify {
            StratifyArg::Gold => {
                let m = &ds.meta[i];
                gold_stratify(&m.summary, &m.demographics, &reference)?.name().to_string()
            }
            StratifyArg::None => "all".to_string(),
        };
        let g = groups.entry(name).or_default();
        g.0.push(i);
        g.1.push(p);
    }
    ensure_dir(&a.out_dir)?;
    let mut outputs = Vec::new();
    let mut cohorts = Vec::new();
    for (name, (rows, profs)) in &groups {
        let ex = explain_cohort(name, &ds, rows, profs)?;
        let title = format!("{} (n={}), {}", name, ex.n, model.endpoint.name());
        let (csv, svg) = overlay_export(
            &ex.curve,
            &ex.profile,
            &ex.markers,
            ds.config.patch_len,
            &a.out_dir.join(name),
            &title,
        )?;
        outputs.push(csv.display().to_string());
        outputs.push(svg.display().to_string());
        cohorts.push(serde_json::to_value(&ex)?);
    }
    let summary_path = a.out_dir.join("explain_summary.json");
    let mut text = serde_json::to_string_pretty(&cohorts)?;
    text.push('\n');
    write_atomic(&summary_path, text.as_bytes())?;
    outputs.push(summary_path.display().to_string());
    let mut inputs = vec![a.model.as_path(), a.data.as_path()];
    if let Some(p) = &a.ref_eq {
        inputs.push(p.as_path());
    }
    write_manifest(
        &a.out_dir.join("explain_manifest.json"),
        &RunManifest {
            command: "explain",
            version: VERSION,
            argv,
            config: json!({"reference": reference, "aggregation": aggregation}),
            seeds: vec![model.seed],
            inputs: hash_inputs(&inputs)?,
            outputs,
            details: Value::Null,
        },
    )?;
    for c in &cohorts {
        stdout_line(&json!({"cohort": c["cohort"], "n": c["n"], "most_important_patch": c["profile"]["most_important_patch"]}));
    }
    Ok(())
}

fn label(a: LabelArgs, argv: &[String]) -> CliResult<()> {
    let (rules, _) = layered(LabelRuleset::default(), a.rules.as_deref())?;
    let file = std::fs::File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let mut out = String::new();
    let mut rejected = 0usize;
    let mut count = 0usize;
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&a.input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PatientRecords = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{} line {}: {e}", a.input.display(), n + 1)))?;
        let outcome = map_records(&p.records, &p.spiro_date, &rules)
            .map_err(|e| Error::Schema(format!("participant {}: {e}", p.id)))?;
        rejected += outcome.rejected.len();
        count += 1;
        out.push_str(&serde_json::to_string(
            &json!({"id": p.id, "labels": outcome.labels, "rejected": outcome.rejected}),
        )?);
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    let mut inputs = vec![a.input.as_path()];
    if let Some(p) = &a.rules {
        inputs.push(p.as_path());
    }
    write_manifest(
        &sibling(&a.out, ".manifest.json"),
        &RunManifest {
            command: "label",
            version: VERSION,
            argv,
            config: serde_json::to_value(&rules)?,
            seeds: Vec::new(),
            inputs: hash_inputs(&inputs)?,
            outputs: vec![a.out.display().to_string()],
            details: Value::Null,
        },
    )?;
    stdout_line(&json!({"participants": count, "rejected_records": rejected}));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_deep() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"d": 4}, "e": 5}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": 5}));
    }

    #[test]
    fn endpoint_all_expands_once() {
        assert_eq!(
            endpoints(&[EndpointArg::Mortality, EndpointArg::All]),
            vec![Endpoint::Mortality, Endpoint::CopdRisk, Endpoint::Exacerbation]
        );
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::Schema(String::new())), 3);
        assert_eq!(exit_code(&Error::Config(String::new())), 2);
        assert_eq!(run(["spiro", "synth", "--bogus"]), 2);
    }
}
