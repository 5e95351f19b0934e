//! End-to-end experiment runner and the flat `key = value` config file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tracing::info;

use crate::error::{FoodError, Result};
use crate::head::{msp_predict, HeadParams, Hyper, UnknownLoss};
use crate::metrics::{
    evaluate, write_detections, write_ground_truth, write_report, Detection, EvalConfig, EvalReport, UNKNOWN_CATEGORY,
};
use crate::numerics::Rng;
use crate::synthbench::{generate, write_dataset, BenchmarkSpec, Proposal, SynthDataset};
use crate::train::{
    finetune, train_base, weight_average, write_checkpoint, Checkpoint, FinetuneVariant, TrainConfig, Trajectory,
};
use crate::udl::SamplingRule;

pub const BASE_STREAM: u64 = 1;
pub const FINETUNE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub benchmark: BenchmarkSpec,
    pub train: TrainConfig,
    pub use_wa: bool,
    pub exclude_unknown_baseline: bool,
    pub eval: EvalConfig,
}

/// Every config key with its one-line description, in echo order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    (
        "seed",
        "master seed; the benchmark and both training stages derive from it",
    ),
    ("num_base", "number of base classes"),
    ("num_novel", "number of novel (few-shot) classes"),
    ("num_unknown", "number of held-out unknown classes, may be 0"),
    ("shots", "few-shot examples per known class"),
    ("feature_dim", "proposal feature dimension D0"),
    (
        "separation",
        "minimum distance between class centers, in within-class std units",
    ),
    ("base_train_per_class", "base-stage proposals per base class"),
    ("test_per_class", "test proposals per known or unknown class"),
    (
        "background_ratio",
        "background proposals per foreground proposal in each split",
    ),
    ("background_scale", "std of the background cloud"),
    (
        "box_jitter",
        "std of proposal box coordinates around the object box, pixels",
    ),
    ("embed_dim", "trunk output dimension D"),
    ("alpha", "cosine classifier temperature"),
    (
        "p_hat",
        "fraction of normalized classifier weights dropped per iteration",
    ),
    ("delta1", "unknown sigmoid slope for foreground pseudo-unknowns"),
    ("delta2", "unknown sigmoid slope for background pseudo-unknowns"),
    ("lambda", "weight of the unknown loss"),
    ("n_pos", "pseudo-unknowns taken from foreground proposals per batch"),
    ("n_neg", "pseudo-unknowns taken from background proposals per batch"),
    (
        "sampling_rule",
        "pseudo-unknown score: max_cond_energy, min_max_prob, min_unknown_logit, max_entropy",
    ),
    ("unknown_loss", "sigmoid (decoupled) or softmax (ablation)"),
    ("base_iterations", "base-stage SGD iterations"),
    ("base_lr", "base-stage learning rate"),
    ("finetune_iterations", "fine-tuning SGD iterations, all stages together"),
    ("finetune_lr", "fine-tuning learning rate"),
    ("batch_size", "proposals per SGD batch"),
    ("fg_fraction", "share of foreground proposals in a batch"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "SGD weight decay"),
    ("finetune_variant", "lp, ft, ft-gdl, lp-ft or lp-ft-gdl"),
    (
        "lp_fraction",
        "share of fine-tuning iterations spent linear probing in lp-* variants",
    ),
    ("gdl_scale", "trunk gradient scale in *-gdl variants"),
    ("wa_step", "fine-tuning iterations between weight-averaging samples"),
    ("use_cwsc", "sparsify classifier weights during fine-tuning"),
    ("use_udl", "train the unknown logit with the decoupling loss"),
    ("use_wa", "evaluate the weight-averaged model instead of the final one"),
    ("exclude_unknown_baseline", "drop the unknown slot at inference"),
    ("iou_threshold", "IoU needed for a match"),
    (
        "score_threshold",
        "score threshold for unknown precision/recall and AOSE",
    ),
    ("beta", "beta of the unknown F-score"),
    ("wi_recall_level", "known recall at which wilderness impact is measured"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FoodError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(FoodError::Config(format!(
            "`{key}` must be true or false, got `{value}`"
        ))),
    }
}

impl ExperimentConfig {
    pub fn hyper(&self) -> &Hyper {
        &self.train.hyper
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.benchmark;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "num_base" => b.num_base = parse_value(key, value)?,
            "num_novel" => b.num_novel = parse_value(key, value)?,
            "num_unknown" => b.num_unknown = parse_value(key, value)?,
            "shots" => b.shots = parse_value(key, value)?,
            "feature_dim" => b.feature_dim = parse_value(key, value)?,
            "separation" => b.separation = parse_value(key, value)?,
            "base_train_per_class" => b.base_train_per_class = parse_value(key, value)?,
            "test_per_class" => b.test_per_class = parse_value(key, value)?,
            "background_ratio" => b.background_ratio = parse_value(key, value)?,
            "background_scale" => b.background_scale = parse_value(key, value)?,
            "box_jitter" => b.box_jitter = parse_value(key, value)?,
            "embed_dim" => t.embed_dim = parse_value(key, value)?,
            "alpha" => t.alpha = parse_value(key, value)?,
            "p_hat" => t.hyper.p_hat = parse_value(key, value)?,
            "delta1" => t.hyper.delta1 = parse_value(key, value)?,
            "delta2" => t.hyper.delta2 = parse_value(key, value)?,
            "lambda" => t.hyper.lambda = parse_value(key, value)?,
            "n_pos" => t.hyper.n_pos = parse_value(key, value)?,
            "n_neg" => t.hyper.n_neg = parse_value(key, value)?,
            "sampling_rule" => t.hyper.sampling_rule = value.parse::<SamplingRule>()?,
            "unknown_loss" => t.hyper.unknown_loss = value.parse::<UnknownLoss>()?,
            "base_iterations" => t.base_iterations = parse_value(key, value)?,
            "base_lr" => t.base_lr = parse_value(key, value)?,
            "finetune_iterations" => t.finetune_iterations = parse_value(key, value)?,
            "finetune_lr" => t.finetune_lr = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "fg_fraction" => t.fg_fraction = parse_value(key, value)?,
            "momentum" => t.momentum = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "finetune_variant" => t.variant = value.parse::<FinetuneVariant>()?,
            "lp_fraction" => t.lp_fraction = parse_value(key, value)?,
            "gdl_scale" => t.gdl_scale = parse_value(key, value)?,
            "wa_step" => t.wa_step = parse_value(key, value)?,
            "use_cwsc" => t.use_cwsc = parse_bool(key, value)?,
            "use_udl" => t.hyper.use_udl = parse_bool(key, value)?,
            "use_wa" => self.use_wa = parse_bool(key, value)?,
            "exclude_unknown_baseline" => self.exclude_unknown_baseline = parse_bool(key, value)?,
            "iou_threshold" => e.iou_threshold = parse_value(key, value)?,
            "score_threshold" => e.score_threshold = parse_value(key, value)?,
            "beta" => e.beta = parse_value(key, value)?,
            "wi_recall_level" => e.wi_recall_level = parse_value(key, value)?,
            other => return Err(FoodError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let b = &self.benchmark;
        let t = &self.train;
        let h = &t.hyper;
        let e = &self.eval;
        // `{:?}` keeps a decimal point on floats so the echo reparses exactly.
        match key {
            "seed" => self.seed.to_string(),
            "num_base" => b.num_base.to_string(),
            "num_novel" => b.num_novel.to_string(),
            "num_unknown" => b.num_unknown.to_string(),
            "shots" => b.shots.to_string(),
            "feature_dim" => b.feature_dim.to_string(),
            "separation" => format!("{:?}", b.separation),
            "base_train_per_class" => b.base_train_per_class.to_string(),
            "test_per_class" => b.test_per_class.to_string(),
            "background_ratio" => format!("{:?}", b.background_ratio),
            "background_scale" => format!("{:?}", b.background_scale),
            "box_jitter" => format!("{:?}", b.box_jitter),
            "embed_dim" => t.embed_dim.to_string(),
            "alpha" => format!("{:?}", t.alpha),
            "p_hat" => format!("{:?}", h.p_hat),
            "delta1" => format!("{:?}", h.delta1),
            "delta2" => format!("{:?}", h.delta2),
            "lambda" => format!("{:?}", h.lambda),
            "n_pos" => h.n_pos.to_string(),
            "n_neg" => h.n_neg.to_string(),
            "sampling_rule" => h.sampling_rule.name().to_string(),
            "unknown_loss" => h.unknown_loss.name().to_string(),
            "base_iterations" => t.base_iterations.to_string(),
            "base_lr" => format!("{:?}", t.base_lr),
            "finetune_iterations" => t.finetune_iterations.to_string(),
            "finetune_lr" => format!("{:?}", t.finetune_lr),
            "batch_size" => t.batch_size.to_string(),
            "fg_fraction" => format!("{:?}", t.fg_fraction),
            "momentum" => format!("{:?}", t.momentum),
            "weight_decay" => format!("{:?}", t.weight_decay),
            "finetune_variant" => t.variant.name().to_string(),
            "lp_fraction" => format!("{:?}", t.lp_fraction),
            "gdl_scale" => format!("{:?}", t.gdl_scale),
            "wa_step" => t.wa_step.to_string(),
            "use_cwsc" => t.use_cwsc.to_string(),
            "use_udl" => h.use_udl.to_string(),
            "use_wa" => self.use_wa.to_string(),
            "exclude_unknown_baseline" => self.exclude_unknown_baseline.to_string(),
            "iou_threshold" => format!("{:?}", e.iou_threshold),
            "score_threshold" => format!("{:?}", e.score_threshold),
            "beta" => format!("{:?}", e.beta),
            "wi_recall_level" => format!("{:?}", e.wi_recall_level),
            other => unreachable!("no getter for {other}"),
        }
    }

    /// Parses config text on top of the defaults. Unknown or repeated keys
    /// are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FoodError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(FoodError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| FoodError::Config(format!("line {}: {}", n + 1, e.root())))?;
        }
        cfg.sync();
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| FoodError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Copies derived fields: benchmark seed, eval class counts, fingerprint.
    pub fn sync(&mut self) {
        self.benchmark.seed = self.seed;
        self.eval.num_base = self.benchmark.num_base;
        self.eval.num_novel = self.benchmark.num_novel;
        self.train.fingerprint = self.fingerprint();
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark
            .validate()
            .map_err(|e| FoodError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| match e {
            FoodError::Config(_) => e,
            other => FoodError::Config(other.to_string()),
        })?;
        let e = &self.eval;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) || !(e.beta > 0.0) {
            return Err(FoodError::Config(
                "iou_threshold must lie in (0, 1] and beta be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&e.wi_recall_level) || !e.score_threshold.is_finite() {
            return Err(FoodError::Config("wi_recall_level must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical echo: every key, documented, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# food experiment config\n");
        for (key, doc) in CONFIG_KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", self.get(key));
        }
        out
    }

    /// First 8 bytes of the SHA-256 of the canonical echo.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// One detection per test proposal not classified as background. The unknown
/// slot maps to category -1.
pub fn predict_detections(params: &HeadParams, test: &[Proposal], exclude_unknown: bool) -> Result<Vec<Detection>> {
    let k = params.num_known();
    let mut dets = Vec::new();
    for p in test {
        let (slot, score) = msp_predict(&p.feature, params, exclude_unknown)?;
        let category = if slot < k {
            slot as i64
        } else if slot == params.unknown_index() {
            UNKNOWN_CATEGORY
        } else {
            continue;
        };
        dets.push(Detection {
            image_id: p.image_id,
            category,
            bbox: p.bbox,
            score,
        });
    }
    Ok(dets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.dir.join("base.ckpt")
    }
    pub fn finetune_checkpoint(&self) -> PathBuf {
        self.dir.join("finetune.ckpt")
    }
    pub fn wa_checkpoint(&self) -> PathBuf {
        self.dir.join("wa.ckpt")
    }
    pub fn detections(&self) -> PathBuf {
        self.dir.join("detections.json")
    }
    pub fn ground_truth(&self) -> PathBuf {
        self.dir.join("ground_truth.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
}

/// In-memory pipeline results.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub dataset: SynthDataset,
    pub base: Checkpoint,
    pub finetuned: Checkpoint,
    pub trajectory: Trajectory,
    /// Present when `use_wa` is set.
    pub averaged: Option<Checkpoint>,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

impl PipelineOutput {
    /// The checkpoint that produced the detections.
    pub fn evaluated(&self) -> &Checkpoint {
        self.averaged.as_ref().unwrap_or(&self.finetuned)
    }
}

pub fn base_stage(config: &ExperimentConfig, dataset: &SynthDataset) -> Result<Checkpoint> {
    let b = &config.benchmark;
    train_base(
        &dataset.train_base,
        b.feature_dim,
        b.num_known(),
        &config.train,
        &mut Rng::with_stream(config.seed, BASE_STREAM),
    )
    .map_err(|e| e.in_stage("train-base"))
}

pub fn finetune_stage(
    config: &ExperimentConfig,
    dataset: &SynthDataset,
    base: &Checkpoint,
) -> Result<(Checkpoint, Trajectory)> {
    finetune(
        base,
        &dataset.train_fewshot,
        &config.train,
        &mut Rng::with_stream(config.seed, FINETUNE_STREAM),
    )
    .map_err(|e| e.in_stage("finetune"))
}

pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    dataset: &SynthDataset,
    ckpt: &Checkpoint,
) -> Result<(Vec<Detection>, EvalReport)> {
    let dets = predict_detections(&ckpt.params, &dataset.test, config.exclude_unknown_baseline)
        .map_err(|e| e.in_stage("inference"))?;
    let report = evaluate(&dets, &dataset.test_ground_truth(), &config.eval).map_err(|e| e.in_stage("eval"))?;
    Ok((dets, report))
}

/// Runs generation, both training stages, optional weight averaging,
/// inference and evaluation without touching the disk.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let mut config = config.clone();
    config.sync();
    config.validate()?;
    let dataset = generate(&config.benchmark).map_err(|e| e.in_stage("gen-data"))?;
    let base = base_stage(&config, &dataset)?;
    let (finetuned, trajectory) = finetune_stage(&config, &dataset, &base)?;
    let averaged = if config.use_wa {
        Some(weight_average(&trajectory).map_err(|e| e.in_stage("weight-average"))?)
    } else {
        None
    };
    let evaluated = averaged.as_ref().unwrap_or(&finetuned);
    let (detections, report) = evaluate_checkpoint(&config, &dataset, evaluated)?;
    Ok(PipelineOutput {
        dataset,
        base,
        finetuned,
        trajectory,
        averaged,
        detections,
        report,
    })
}

/// [`run_pipeline`] plus every artifact written under `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<PipelineOutput> {
    let mut config = config.clone();
    config.sync();
    config.validate()?;
    fs::create_dir_all(out)?;
    let files = Artifacts::new(out);
    fs::write(files.config(), config.to_text())?;
    let result = run_pipeline(&config)?;
    write_dataset(&result.dataset, &files.dataset())?;
    write_checkpoint(&result.base, &files.base_checkpoint())?;
    write_checkpoint(&result.finetuned, &files.finetune_checkpoint())?;
    if let Some(wa) = &result.averaged {
        write_checkpoint(wa, &files.wa_checkpoint())?;
    }
    write_detections(&result.detections, &files.detections())?;
    write_ground_truth(&result.dataset.test_ground_truth(), &files.ground_truth())?;
    write_report(&result.report, &files.report_json())?;
    let label = row_label(&config);
    fs::write(files.report_txt(), format_report(&[(label, result.report.clone())]))?;
    info!(out = %out.display(), "experiment written");
    Ok(result)
}

/// Row label used in report tables, e.g. `food/lp-ft-gdl/10shot/seed7`.
pub fn row_label(config: &ExperimentConfig) -> String {
    let method = if config.train.hyper.use_udl { "food" } else { "baseline" };
    format!(
        "{method}/{}/{}shot/seed{}",
        config.train.variant, config.benchmark.shots, config.seed
    )
}

const COLUMNS: [&str; 9] = ["mAP_K", "mAP_B", "mAP_N", "AP_U", "P_U", "R_U", "F_U", "WI", "AOSE"];

fn row_values(r: &EvalReport) -> [f64; 9] {
    [
        r.map_k,
        r.map_b,
        r.map_n,
        r.ap_u,
        r.p_u,
        r.r_u,
        r.f_u,
        r.wi,
        r.aose as f64,
    ]
}

/// Plain-text table, one row per report, plus a mean row when there is
/// more than one.
pub fn format_report(rows: &[(String, EvalReport)]) -> String {
    let mut width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("method".len());
    if rows.len() > 1 {
        width = width.max("mean".len());
    }
    let mut out = format!("{:<width$}", "method");
    for c in COLUMNS {
        let _ = write!(out, " {c:>8}");
    }
    out.push('\n');
    let line = |out: &mut String, label: &str, vals: &[f64; 9]| {
        let _ = write!(out, "{label:<width$}");
        for v in vals {
            let _ = write!(out, " {v:>8.2}");
        }
        out.push('\n');
    };
    for (label, r) in rows {
        line(&mut out, label, &row_values(r));
    }
    if rows.len() > 1 {
        let mut mean = [0.0; 9];
        for (_, r) in rows {
            for (m, v) in mean.iter_mut().zip(row_values(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        line(&mut out, "mean", &mean);
    }
    out
}
