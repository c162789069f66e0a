//! Experiment orchestration: configuration files, deterministic artifacts,
//! and the five workflow commands behind the `shiftlab` binary.
//!
//! A workflow directory is built up in stages: `pretrain` writes
//! `model.json`, `intermediate` adds `refiner.json`, `adapt` replays a
//! shifted stream against them and records `run_<hash>.json` plus a
//! confusion CSV, `sweep` fans the adapt stage out over a grid, and
//! `toy-verify` checks the closed-form theory against Monte Carlo without
//! touching any model. Identical configuration and seed always reproduce
//! byte-identical artifacts: filenames are content-addressed by a
//! configuration hash, nothing records wall-clock time or absolute paths.

use crate::adapt::{
    build_classifier, evaluate, pretrain, run_stream, AdaptConfig, Method, MlpClassifier,
    PretrainConfig, RunResult,
};
use crate::datagen::{
    make_stream, paired_clusters_spec, sample_balanced, toy_spec, GaussianMixtureSpec, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::nn::BnMode;
use crate::refiner::{
    load_refiner, save_refiner, train_split, train_unified, LossPoint, Refiner,
    RefinerTrainConfig, RefinerVariant, TrainedRefiner,
};
use crate::rng::derive_seed;
use crate::theory::{
    compare_closed_form_to_mc, default_mc_fixtures, optimal_refinement, verify_properties,
    CentroidModel, McComparison, PropertyGrid, PropertyReport, ToyParams,
};
use crate::linalg::Matrix;
use crate::rng::rng_from;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

pub const MODEL_FORMAT: &str = "shiftlab-model/1";
pub const RUN_FORMAT: &str = "shiftlab-run/1";
pub const SUMMARY_FORMAT: &str = "shiftlab-summary/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub refiner: RefinerSection,
    pub adapt: AdaptSection,
    pub stream: StreamSection,
    pub sweep: SweepSection,
    pub toy: ToySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            benchmark: BenchmarkConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            refiner: RefinerSection::default(),
            adapt: AdaptSection::default(),
            stream: StreamSection::default(),
            sweep: SweepSection::default(),
            toy: ToySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.benchmark.spec()?;
        if self.model.hidden.is_empty() {
            return Err(Error::Config("model needs at least one hidden layer".into()));
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        self.pretrain.check()?;
        self.refiner.check()?;
        self.adapt.check()?;
        self.stream.check()?;
        self.sweep.check()?;
        self.toy.check()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchmarkConfig {
    /// Paired Gaussian clusters; the standard ten-class benchmark.
    PairedClusters { k: usize, dim: usize, major: f64, minor: f64, sigma: f64 },
    /// The four-class planar model with analytically known confusion.
    Toy4 { d: f64, beta: f64, sigma: f64, p: f64 },
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig::PairedClusters {
            k: crate::datagen::BENCH_K,
            dim: crate::datagen::BENCH_DIM,
            major: crate::datagen::BENCH_MAJOR,
            minor: crate::datagen::BENCH_MINOR,
            sigma: crate::datagen::BENCH_SIGMA,
        }
    }
}

impl BenchmarkConfig {
    pub fn spec(&self) -> Result<GaussianMixtureSpec> {
        match self {
            BenchmarkConfig::PairedClusters { k, dim, major, minor, sigma } => {
                paired_clusters_spec(*k, *dim, *major, *minor, *sigma)
            }
            BenchmarkConfig::Toy4 { d, beta, sigma, p } => {
                toy_spec(&ToyParams::new(*d, *beta, *sigma, *p)?)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: vec![64, 64] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_accuracy: f64,
    /// Training samples drawn per class.
    pub per_class: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { epochs: 40, batch_size: 64, lr: 1e-3, min_accuracy: 0.5, per_class: 500 }
    }
}

impl PretrainSection {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.per_class == 0 {
            return Err(Error::Config("pretrain batch_size and per_class must be positive".into()));
        }
        Ok(())
    }

    fn to_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            min_accuracy: self.min_accuracy,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSection {
    pub variant: RefinerVariant,
    /// Split variant only: constrain the transform to a diagonal matrix.
    pub diagonal: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub dirichlet_delta: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Step size for the split variant's severity detector.
    pub detector_lr: f64,
    pub logit_scale: f64,
    /// Intermediate-time samples drawn per class.
    pub per_class: usize,
}

impl Default for RefinerSection {
    fn default() -> Self {
        RefinerSection {
            variant: RefinerVariant::Unified,
            diagonal: false,
            epochs: 20,
            batch_size: 64,
            hidden: 64,
            dirichlet_delta: 0.1,
            alpha: 0.1,
            lr: 1e-3,
            detector_lr: 5e-2,
            logit_scale: 1.0,
            per_class: 500,
        }
    }
}

impl RefinerSection {
    fn check(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Config("refiner per_class must be positive".into()));
        }
        self.to_config(0).validate()
    }

    fn to_config(&self, seed: u64) -> RefinerTrainConfig {
        RefinerTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            hidden: self.hidden,
            dirichlet_delta: self.dirichlet_delta,
            alpha: self.alpha,
            lr: self.lr,
            detector_lr: self.detector_lr,
            logit_scale: self.logit_scale,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub method: Method,
    /// Apply the trained refiner during adaptation.
    pub refine: bool,
    pub lr: f64,
    pub pl_threshold: f64,
    pub logit_scale: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            method: Method::BnAdapt,
            refine: false,
            lr: 1e-3,
            pl_threshold: 0.95,
            logit_scale: 1.0,
        }
    }
}

impl AdaptSection {
    fn check(&self) -> Result<()> {
        self.to_config().validate()
    }

    fn to_config(&self) -> AdaptConfig {
        AdaptConfig {
            method: self.method,
            lr: self.lr,
            pl_threshold: self.pl_threshold,
            logit_scale: self.logit_scale,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub shift: ShiftSpec,
    pub batch_size: usize,
    /// Test samples drawn per class before the shift reshapes them.
    pub per_class: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection { shift: ShiftSpec::Balanced, batch_size: 64, per_class: 200 }
    }
}

impl StreamSection {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.per_class == 0 {
            return Err(Error::Config("stream batch_size and per_class must be positive".into()));
        }
        self.shift.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    pub refine: Vec<bool>,
    pub shifts: Vec<ShiftSpec>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            methods: vec![Method::BnAdapt, Method::Tent, Method::Pl],
            refine: vec![false, true],
            shifts: vec![
                ShiftSpec::LongTail { rho: 1.0, inverted: false },
                ShiftSpec::LongTail { rho: 10.0, inverted: false },
                ShiftSpec::LongTail { rho: 100.0, inverted: false },
            ],
            seeds: vec![0, 1, 2, 3],
        }
    }
}

impl SweepSection {
    fn check(&self) -> Result<()> {
        if self.methods.is_empty() || self.refine.is_empty() || self.shifts.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config("sweep grid axes must all be non-empty".into()));
        }
        for s in &self.shifts {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    /// Monte Carlo draws per fixture in `toy-verify`.
    pub mc_draws: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection { mc_draws: 1_000_000 }
    }
}

impl ToySection {
    fn check(&self) -> Result<()> {
        if self.mc_draws < 1000 {
            return Err(Error::Config("toy verification needs at least 1000 draws".into()));
        }
        Ok(())
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// First 12 hex characters of the SHA-256 of the canonical JSON encoding.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(cfg)?;
    Ok(hash12(&[&canonical]))
}

fn hash12(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(12);
    for byte in digest.iter().take(6) {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn csv_comment(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash},seed={seed}\n")
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn resolve(config: Option<&Path>, seed: Option<u64>) -> Result<(ExperimentConfig, String)> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let hash = config_hash(&cfg)?;
    Ok((cfg, hash))
}

#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    /// Accuracy on a held-out balanced sample of the source distribution.
    pub source_accuracy: f64,
    pub model: MlpClassifier,
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    write_json(path, file)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!(
            "cannot read model {}: {e}; run the pretrain command into this directory first",
            path.display()
        ))
    })?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.format != MODEL_FORMAT {
        return Err(Error::Config(format!(
            "{} declares format {:?}, this build reads {:?}",
            path.display(),
            file.format,
            MODEL_FORMAT
        )));
    }
    file.model.validate()?;
    Ok(file)
}

#[derive(Serialize)]
struct SummaryFile<'a, T: Serialize> {
    format: &'a str,
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    metrics: T,
}

fn write_summary<T: Serialize>(
    out: &Path,
    command: &str,
    hash: &str,
    seed: u64,
    metrics: T,
    text: &str,
) -> Result<()> {
    write_json(
        &out.join("summary.json"),
        &SummaryFile {
            format: SUMMARY_FORMAT,
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: hash,
            seed,
            metrics,
        },
    )?;
    write_text(&out.join("summary.txt"), text)?;
    print!("{text}");
    Ok(())
}

fn loss_curve_csv(hash: &str, seed: u64, points: &[LossPoint]) -> String {
    let mut csv = csv_comment(hash, seed);
    csv.push_str("epoch,step,refine_loss,aux_loss,total\n");
    for p in points {
        let _ = writeln!(csv, "{},{},{},{},{}", p.epoch, p.step, p.refine_loss, p.aux_loss, p.total);
    }
    csv
}

#[derive(Serialize)]
struct PretrainMetrics {
    k: usize,
    dim: usize,
    hidden: Vec<usize>,
    train_samples: usize,
    epochs: usize,
    final_train_accuracy: f64,
    source_accuracy: f64,
}

/// Train the benchmark classifier and write `model.json`.
pub fn cmd_pretrain(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let (cfg, hash) = resolve(config, seed)?;
    prepare_out(out)?;
    let spec = cfg.benchmark.spec()?;
    let data = sample_balanced(&spec, cfg.pretrain.per_class, derive_seed(cfg.seed, "pretrain-data", 0))?;
    let mut model =
        build_classifier(spec.dim, &cfg.model.hidden, spec.k, derive_seed(cfg.seed, "model-init", 0));
    let report = pretrain(&mut model, &data, &cfg.pretrain.to_config(derive_seed(cfg.seed, "pretrain", 0)))?;
    let held_out = sample_balanced(&spec, 200, derive_seed(cfg.seed, "pretrain-eval", 0))?;
    let source_accuracy = evaluate(&model, &held_out, BnMode::Eval)?;

    save_model(
        &out.join("model.json"),
        &ModelFile {
            format: MODEL_FORMAT.to_string(),
            config_hash: hash.clone(),
            seed: cfg.seed,
            source_accuracy,
            model,
        },
    )?;
    let mut csv = csv_comment(&hash, cfg.seed);
    csv.push_str("epoch,mean_ce\n");
    for (e, v) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(csv, "{e},{v}");
    }
    write_text(&out.join("loss_curve.csv"), &csv)?;

    let text = format!(
        "pretrain (config {hash}, seed {})\n\
         classes {}, features {}, hidden {:?}\n\
         {} samples, {} epochs\n\
         train accuracy {:.4}, held-out source accuracy {:.4}\n",
        cfg.seed,
        spec.k,
        spec.dim,
        cfg.model.hidden,
        data.n(),
        report.epochs,
        report.final_train_accuracy,
        source_accuracy,
    );
    write_summary(
        out,
        "pretrain",
        &hash,
        cfg.seed,
        PretrainMetrics {
            k: spec.k,
            dim: spec.dim,
            hidden: cfg.model.hidden.clone(),
            train_samples: data.n(),
            epochs: report.epochs,
            final_train_accuracy: report.final_train_accuracy,
            source_accuracy,
        },
        &text,
    )
}

fn train_refiner_for(
    cfg: &ExperimentConfig,
    model: &MlpClassifier,
    variant: RefinerVariant,
    seed: u64,
) -> Result<TrainedRefiner> {
    let spec = cfg.benchmark.spec()?;
    let data = sample_balanced(&spec, cfg.refiner.per_class, derive_seed(seed, "intermediate-data", 0))?;
    let train_cfg = cfg.refiner.to_config(derive_seed(seed, "refiner-train", 0));
    match variant {
        RefinerVariant::Unified => train_unified(model, &data, &train_cfg),
        RefinerVariant::Split => train_split(model, &data, &train_cfg, cfg.refiner.diagonal),
    }
}

#[derive(Serialize)]
struct IntermediateMetrics {
    variant: String,
    diagonal: bool,
    hidden: usize,
    epochs: usize,
    steps: usize,
    first_loss: f64,
    last_loss: f64,
}

/// Train the refiner against the stored classifier and write `refiner.json`.
pub fn cmd_intermediate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    variant: Option<RefinerVariant>,
) -> Result<()> {
    let (mut cfg, _) = resolve(config, seed)?;
    if let Some(v) = variant {
        cfg.refiner.variant = v;
    }
    let hash = config_hash(&cfg)?;
    prepare_out(out)?;
    let model_file = load_model(&out.join("model.json"))?;
    let trained = train_refiner_for(&cfg, &model_file.model, cfg.refiner.variant, cfg.seed)?;
    save_refiner(&out.join("refiner.json"), &trained.refiner)?;
    write_text(&out.join("loss_curve.csv"), &loss_curve_csv(&hash, cfg.seed, &trained.loss_curve))?;

    let first_loss = trained.loss_curve.first().map(|p| p.total).unwrap_or(0.0);
    let last_loss = trained.loss_curve.last().map(|p| p.total).unwrap_or(0.0);
    let text = format!(
        "intermediate (config {hash}, seed {})\n\
         refiner variant {}{}, hidden {}\n\
         {} epochs, {} steps\n\
         total loss {:.4} -> {:.4}\n",
        cfg.seed,
        cfg.refiner.variant.name(),
        if cfg.refiner.diagonal { " (diagonal)" } else { "" },
        cfg.refiner.hidden,
        cfg.refiner.epochs,
        trained.loss_curve.len(),
        first_loss,
        last_loss,
    );
    write_summary(
        out,
        "intermediate",
        &hash,
        cfg.seed,
        IntermediateMetrics {
            variant: cfg.refiner.variant.name().to_string(),
            diagonal: cfg.refiner.diagonal,
            hidden: cfg.refiner.hidden,
            epochs: cfg.refiner.epochs,
            steps: trained.loss_curve.len(),
            first_loss,
            last_loss,
        },
        &text,
    )
}

#[derive(Serialize)]
struct RunFile<'a> {
    format: &'a str,
    config_hash: &'a str,
    command: &'a str,
    seed: u64,
    result: &'a RunResult,
}

fn confusion_csv(hash: &str, seed: u64, result: &RunResult) -> String {
    let k = result.confusion.rows();
    let mut csv = csv_comment(hash, seed);
    csv.push_str("true_class");
    for j in 0..k {
        let _ = write!(csv, ",pred_{j}");
    }
    csv.push('\n');
    for i in 0..k {
        let _ = write!(csv, "{i}");
        for v in result.confusion.row(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    csv
}

fn run_test_stream(
    cfg: &ExperimentConfig,
    model: &MlpClassifier,
    refiner: Option<&Refiner>,
    shift: &ShiftSpec,
    adapt_cfg: &AdaptConfig,
    seed: u64,
) -> Result<RunResult> {
    let spec = cfg.benchmark.spec()?;
    let data = sample_balanced(&spec, cfg.stream.per_class, derive_seed(seed, "test-data", 0))?;
    let stream = make_stream(&data, shift, cfg.stream.batch_size, derive_seed(seed, "test-stream", 0))?;
    run_stream(model, refiner, &stream, adapt_cfg)
}

fn write_run_files(
    out: &Path,
    hash: &str,
    command: &str,
    seed: u64,
    result: &RunResult,
) -> Result<String> {
    let refined = if result.refined { "refined" } else { "plain" };
    let run_id = hash12(&[
        hash,
        command,
        result.method.name(),
        &result.stream.kind,
        refined,
        &seed.to_string(),
    ]);
    write_json(
        &out.join(format!("run_{run_id}.json")),
        &RunFile { format: RUN_FORMAT, config_hash: hash, command, seed, result },
    )?;
    write_text(&out.join(format!("confusion_{run_id}.csv")), &confusion_csv(hash, seed, result))?;
    Ok(run_id)
}

#[derive(Serialize)]
struct AdaptMetrics {
    method: String,
    refined: bool,
    shift: String,
    run_id: String,
    n_samples: usize,
    n_batches: usize,
    accuracy: f64,
    mean_signature_d: f64,
    source_accuracy: f64,
}

/// Replay the configured shifted stream against the stored model (and
/// refiner when enabled), writing a run record and confusion matrix.
pub fn cmd_adapt(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let (cfg, hash) = resolve(config, seed)?;
    prepare_out(out)?;
    let model_file = load_model(&out.join("model.json"))?;
    let refiner = if cfg.adapt.refine {
        let path = out.join("refiner.json");
        if !path.exists() {
            return Err(Error::Config(format!(
                "adapt.refine is set but {} is missing; run the intermediate command first",
                path.display()
            )));
        }
        Some(load_refiner(&path)?)
    } else {
        None
    };
    let adapt_cfg = cfg.adapt.to_config();
    let result = run_test_stream(
        &cfg,
        &model_file.model,
        refiner.as_ref(),
        &cfg.stream.shift,
        &adapt_cfg,
        cfg.seed,
    )?;
    let run_id = write_run_files(out, &hash, "adapt", cfg.seed, &result)?;

    let floor = (model_file.model.k as f64).ln();
    let text = format!(
        "adapt (config {hash}, seed {})\n\
         method {}, refiner {}, shift {}\n\
         {} samples in {} batches\n\
         accuracy {:.4} (source model scored {:.4} on balanced data)\n\
         mean signature divergence {:.4} (uniform floor {:.4})\n\
         run {run_id}\n",
        cfg.seed,
        result.method.name(),
        if result.refined { "on" } else { "off" },
        result.stream.kind,
        result.n_samples,
        result.n_batches,
        result.overall_accuracy,
        model_file.source_accuracy,
        result.mean_signature_d(),
        floor,
    );
    write_summary(
        out,
        "adapt",
        &hash,
        cfg.seed,
        AdaptMetrics {
            method: result.method.name().to_string(),
            refined: result.refined,
            shift: result.stream.kind.clone(),
            run_id,
            n_samples: result.n_samples,
            n_batches: result.n_batches,
            accuracy: result.overall_accuracy,
            mean_signature_d: result.mean_signature_d(),
            source_accuracy: model_file.source_accuracy,
        },
        &text,
    )
}

#[derive(Serialize)]
struct ToyVerifyReport {
    properties: PropertyReport,
    mc: Vec<McComparison>,
    identity_models: usize,
    identity_max_deviation: f64,
    prior_row_max_error: f64,
    passed: bool,
}

/// Random centroid geometry with enough feature dimensions for the
/// refinement solve to be well posed.
fn random_centroid_model(seed: u64, matched_priors: bool) -> CentroidModel {
    let mut rng = rng_from(seed);
    let k = rng.gen_range(3..=6);
    let d = k + rng.gen_range(0..3);
    let means = Matrix::from_vec(k, d, (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let train_priors: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let test_priors = if matched_priors {
        train_priors.clone()
    } else {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    };
    CentroidModel { means, train_priors, test_priors }
}

/// Check the closed-form theory: analytical confusion against Monte Carlo,
/// the ordering/monotonicity properties on the default grid, and the
/// matched-prior identity of the optimal refinement.
pub fn cmd_toy_verify(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let (cfg, hash) = resolve(config, seed)?;
    prepare_out(out)?;
    let properties = verify_properties(&PropertyGrid::default())?;
    let mut mc = Vec::new();
    for (i, params) in default_mc_fixtures().iter().enumerate() {
        mc.push(compare_closed_form_to_mc(
            params,
            cfg.toy.mc_draws,
            derive_seed(cfg.seed, "toy-mc", i as u64),
        )?);
    }
    let mut identity_max: f64 = 0.0;
    let mut prior_row_max: f64 = 0.0;
    let n_models: usize = 20;
    for i in 0..n_models as u64 {
        let model = random_centroid_model(derive_seed(cfg.seed, "toy-centroids", i), true);
        let w = optimal_refinement(&model)?;
        let k = w.rows();
        identity_max = identity_max.max(w.max_abs_diff(&Matrix::identity(k)));
        // with distinct priors the prior row must still map exactly
        let model = random_centroid_model(derive_seed(cfg.seed, "toy-centroids-shifted", i), false);
        let w = optimal_refinement(&model)?;
        for j in 0..w.cols() {
            let mut acc = 0.0;
            for r in 0..w.rows() {
                acc += model.train_priors[r] * w.get(r, j);
            }
            prior_row_max = prior_row_max.max((acc - model.test_priors[j]).abs());
        }
    }

    let props_ok = properties.passed();
    let mc_ok = mc.iter().all(|c| c.within_3se);
    let identity_ok = identity_max < 1e-10;
    let prior_ok = prior_row_max < 1e-9;
    let passed = props_ok && mc_ok && identity_ok && prior_ok;

    let max_se = mc.iter().map(|c| c.max_se_units).fold(0.0f64, f64::max);
    let max_diff = mc.iter().map(|c| c.max_abs_diff).fold(0.0f64, f64::max);
    let mut text = format!(
        "toy verification (config {hash}, seed {})\n\
         properties: {} cells, {} checks, {} violations  {}\n\
         monte carlo: {} fixtures x {} draws, max |diff| {:.5} ({:.2} SE)  {}\n\
         matched-prior identity: {} models, max deviation {:.2e}  {}\n\
         prior-row exactness: max error {:.2e}  {}\n",
        cfg.seed,
        properties.cells,
        properties.checks,
        properties.violations.len(),
        if props_ok { "PASS" } else { "FAIL" },
        mc.len(),
        cfg.toy.mc_draws,
        max_diff,
        max_se,
        if mc_ok { "PASS" } else { "FAIL" },
        n_models,
        identity_max,
        if identity_ok { "PASS" } else { "FAIL" },
        prior_row_max,
        if prior_ok { "PASS" } else { "FAIL" },
    );
    let _ = writeln!(text, "overall {}", if passed { "PASS" } else { "FAIL" });

    let report = ToyVerifyReport {
        properties,
        mc,
        identity_models: n_models,
        identity_max_deviation: identity_max,
        prior_row_max_error: prior_row_max,
        passed,
    };
    write_json(&out.join("toy_verify.json"), &report)?;
    write_text(&out.join("summary.txt"), &text)?;
    print!("{text}");
    if !passed {
        return Err(Error::Verification(
            "toy model verification failed; see toy_verify.json".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct SweepCell {
    shift: String,
    method: String,
    refined: bool,
    seed: u64,
    run_id: String,
    accuracy: f64,
    mean_signature_d: f64,
}

#[derive(Serialize)]
struct SweepGroup {
    shift: String,
    method: String,
    refined: bool,
    n_seeds: usize,
    mean_accuracy: f64,
    std_accuracy: f64,
    mean_signature_d: f64,
}

#[derive(Serialize)]
struct SweepMetrics {
    seeds: Vec<u64>,
    cells: Vec<SweepGroup>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Fan the adapt stage over `methods x refine x shifts x seeds`. Each seed
/// gets its own independently pretrained classifier and refiner; cells
/// within a seed share them. `jobs` caps the worker threads.
pub fn cmd_sweep(config: Option<&Path>, out: &Path, seed: Option<u64>, jobs: usize) -> Result<()> {
    let (mut cfg, _) = resolve(config, None)?;
    if let Some(s) = seed {
        cfg.sweep.seeds = vec![s];
    }
    let hash = config_hash(&cfg)?;
    prepare_out(out)?;
    let spec = cfg.benchmark.spec()?;
    let needs_refiner = cfg.sweep.refine.iter().any(|&r| r);

    // one model (and refiner) per sweep seed, shared by that seed's cells
    let mut trained: Vec<(u64, MlpClassifier, Option<Refiner>)> = Vec::new();
    for &s in &cfg.sweep.seeds {
        let data = sample_balanced(&spec, cfg.pretrain.per_class, derive_seed(s, "pretrain-data", 0))?;
        let mut model =
            build_classifier(spec.dim, &cfg.model.hidden, spec.k, derive_seed(s, "model-init", 0));
        pretrain(&mut model, &data, &cfg.pretrain.to_config(derive_seed(s, "pretrain", 0)))?;
        let refiner = if needs_refiner {
            Some(train_refiner_for(&cfg, &model, cfg.refiner.variant, s)?.refiner)
        } else {
            None
        };
        trained.push((s, model, refiner));
    }

    struct Cell {
        shift: ShiftSpec,
        method: Method,
        refined: bool,
        seed_idx: usize,
    }
    let mut cells = Vec::new();
    for shift in &cfg.sweep.shifts {
        for &method in &cfg.sweep.methods {
            for &refined in &cfg.sweep.refine {
                for seed_idx in 0..cfg.sweep.seeds.len() {
                    cells.push(Cell { shift: shift.clone(), method, refined, seed_idx });
                }
            }
        }
    }

    let workers = jobs.max(1).min(cells.len().max(1));
    let cfg_ref = &cfg;
    let trained_ref = &trained;
    let cells_ref = &cells;
    let results: Vec<Result<RunResult>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            handles.push(scope.spawn(move || {
                let mut part = Vec::new();
                for idx in (w..cells_ref.len()).step_by(workers) {
                    let cell = &cells_ref[idx];
                    let (s, model, refiner) = &trained_ref[cell.seed_idx];
                    let adapt_cfg = AdaptConfig {
                        method: cell.method,
                        lr: cfg_ref.adapt.lr,
                        pl_threshold: cfg_ref.adapt.pl_threshold,
                        logit_scale: cfg_ref.adapt.logit_scale,
                    };
                    let refiner = if cell.refined { refiner.as_ref() } else { None };
                    part.push((
                        idx,
                        run_test_stream(cfg_ref, model, refiner, &cell.shift, &adapt_cfg, *s),
                    ));
                }
                part
            }));
        }
        let mut results: Vec<Option<Result<RunResult>>> = (0..cells.len()).map(|_| None).collect();
        for handle in handles {
            for (idx, r) in handle.join().expect("sweep worker panicked") {
                results[idx] = Some(r);
            }
        }
        results.into_iter().map(|r| r.expect("every cell ran")).collect()
    });

    let mut rows = Vec::with_capacity(cells.len());
    for (cell, result) in cells.iter().zip(results) {
        let result = result?;
        let s = cfg.sweep.seeds[cell.seed_idx];
        let run_id = write_run_files(out, &hash, "sweep", s, &result)?;
        rows.push(SweepCell {
            shift: result.stream.kind.clone(),
            method: result.method.name().to_string(),
            refined: result.refined,
            seed: s,
            run_id,
            accuracy: result.overall_accuracy,
            mean_signature_d: result.mean_signature_d(),
        });
    }

    let mut csv = csv_comment(&hash, cfg.seed);
    csv.push_str("shift,method,refined,seed,run_id,accuracy,mean_signature_d\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.shift, r.method, r.refined, r.seed, r.run_id, r.accuracy, r.mean_signature_d
        );
    }
    write_text(&out.join("sweep.csv"), &csv)?;

    // aggregate over seeds, preserving the configured grid order
    let mut groups = Vec::new();
    let per_seed = cfg.sweep.seeds.len();
    for chunk in rows.chunks(per_seed) {
        let acc: Vec<f64> = chunk.iter().map(|r| r.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let d: Vec<f64> = chunk.iter().map(|r| r.mean_signature_d).collect();
        groups.push(SweepGroup {
            shift: chunk[0].shift.clone(),
            method: chunk[0].method.clone(),
            refined: chunk[0].refined,
            n_seeds: chunk.len(),
            mean_accuracy,
            std_accuracy,
            mean_signature_d: mean_std(&d).0,
        });
    }

    let mut text = format!(
        "sweep (config {hash}, seeds {:?}, {} cells)\n",
        cfg.sweep.seeds,
        rows.len()
    );
    let _ = writeln!(text, "{:<34} {:<9} {:<8} accuracy", "shift", "method", "refined");
    for g in &groups {
        let _ = writeln!(
            text,
            "{:<34} {:<9} {:<8} {:.4} +- {:.4}",
            g.shift,
            g.method,
            if g.refined { "yes" } else { "no" },
            g.mean_accuracy,
            g.std_accuracy
        );
    }
    write_summary(
        out,
        "sweep",
        &hash,
        cfg.seed,
        SweepMetrics { seeds: cfg.sweep.seeds.clone(), cells: groups },
        &text,
    )
}
