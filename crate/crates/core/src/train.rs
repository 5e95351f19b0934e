//! SGD training: base stage, linear probing, (gradient-decoupled) fine-tuning,
//! checkpoint trajectories and weight averaging.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::str::FromStr;

use tracing::{debug, info};

use crate::cwsc::{sample_mask, ClassifierWeights};
use crate::error::{FoodError, Result};
use crate::head::{total_loss_grad, HeadGrads, HeadParams, Hyper, UnknownLoss};
use crate::numerics::{Mat64, Rng, Vec64};
use crate::synthbench::{check_training_split, BatchSampler, Proposal};
use crate::udl::SamplingRule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FOODCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Base,
    LinearProbe,
    Finetune,
    Averaged,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Base => "base",
            Stage::LinearProbe => "linear_probe",
            Stage::Finetune => "finetune",
            Stage::Averaged => "averaged",
        }
    }

    fn tag(self) -> u32 {
        match self {
            Stage::Init => 0,
            Stage::Base => 1,
            Stage::LinearProbe => 2,
            Stage::Finetune => 3,
            Stage::Averaged => 4,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            0 => Stage::Init,
            1 => Stage::Base,
            2 => Stage::LinearProbe,
            3 => Stage::Finetune,
            4 => Stage::Averaged,
            t => return Err(FoodError::Format(format!("checkpoint: unknown stage tag {t}"))),
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fine-tuning regimes. `Lp*` variants start with a head-only stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneVariant {
    Lp,
    Ft,
    FtGdl,
    LpFt,
    LpFtGdl,
}

impl FinetuneVariant {
    pub const ALL: [FinetuneVariant; 5] = [
        FinetuneVariant::Lp,
        FinetuneVariant::Ft,
        FinetuneVariant::FtGdl,
        FinetuneVariant::LpFt,
        FinetuneVariant::LpFtGdl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneVariant::Lp => "lp",
            FinetuneVariant::Ft => "ft",
            FinetuneVariant::FtGdl => "ft-gdl",
            FinetuneVariant::LpFt => "lp-ft",
            FinetuneVariant::LpFtGdl => "lp-ft-gdl",
        }
    }
}

impl fmt::Display for FinetuneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FinetuneVariant {
    type Err = FoodError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace(['_', '+'], "-");
        FinetuneVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            FoodError::Config(format!(
                "unknown finetune variant `{s}` (lp, ft, ft-gdl, lp-ft, lp-ft-gdl)"
            ))
        })
    }
}

/// Gradient multipliers for the two parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradScale {
    pub trunk: f64,
    pub head: f64,
}

impl GradScale {
    pub const FULL: GradScale = GradScale { trunk: 1.0, head: 1.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    v_trunk_w: Mat64,
    v_trunk_b: Vec64,
    v_classifier: Mat64,
}

impl OptimState {
    pub fn new(params: &HeadParams, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(FoodError::Config(format!("learning rate must be positive, got {lr}")));
        }
        let (r, c) = params.classifier.w().shape();
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            v_trunk_w: Mat64::zeros(params.trunk_w.rows(), params.trunk_w.cols()),
            v_trunk_b: vec![0.0; params.trunk_b.len()],
            v_classifier: Mat64::zeros(r, c),
        })
    }
}

#[derive(Clone, Copy)]
struct Coeffs {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

fn momentum_update(theta: &mut [f64], v: &mut [f64], g: &[f64], k: Coeffs, scale: f64) {
    for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = k.momentum * *v + g + k.weight_decay * *t;
        *t -= k.lr * scale * *v;
    }
}

/// `v <- mu v + g + wd theta; theta <- theta - lr scale v`. A group with
/// scale 0 is skipped entirely, momentum included.
pub fn sgd_step(params: &mut HeadParams, grads: &HeadGrads, opt: &mut OptimState, scale: GradScale) -> Result<()> {
    if grads.trunk_w.shape() != params.trunk_w.shape() || opt.v_trunk_w.shape() != params.trunk_w.shape() {
        return Err(FoodError::ShapeMismatch("trunk.weight"));
    }
    if grads.trunk_b.len() != params.trunk_b.len() || opt.v_trunk_b.len() != params.trunk_b.len() {
        return Err(FoodError::ShapeMismatch("trunk.bias"));
    }
    let cls_shape = params.classifier.w().shape();
    if grads.classifier.shape() != cls_shape || opt.v_classifier.shape() != cls_shape {
        return Err(FoodError::ShapeMismatch("classifier.weight"));
    }
    let k = Coeffs {
        lr: opt.lr,
        momentum: opt.momentum,
        weight_decay: opt.weight_decay,
    };
    if scale.trunk != 0.0 {
        momentum_update(
            params.trunk_w.as_mut_slice(),
            opt.v_trunk_w.as_mut_slice(),
            grads.trunk_w.as_slice(),
            k,
            scale.trunk,
        );
        momentum_update(&mut params.trunk_b, &mut opt.v_trunk_b, &grads.trunk_b, k, scale.trunk);
    }
    if scale.head != 0.0 {
        let w = params.classifier.w_mut();
        momentum_update(
            w.as_mut_slice(),
            opt.v_classifier.as_mut_slice(),
            grads.classifier.as_slice(),
            k,
            scale.head,
        );
    }
    if !params.is_finite() {
        return Err(FoodError::NumericFailure("sgd update".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Trunk output width D.
    pub embed_dim: usize,
    pub alpha: f64,
    pub hyper: Hyper,
    pub base_iterations: usize,
    pub base_lr: f64,
    pub finetune_iterations: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub fg_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub variant: FinetuneVariant,
    /// Share of fine-tune iterations spent linear probing in `lp-*` variants.
    pub lp_fraction: f64,
    pub gdl_scale: f64,
    pub use_cwsc: bool,
    pub wa_step: usize,
    pub fingerprint: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            alpha: 20.0,
            hyper: Hyper::default(),
            base_iterations: 2000,
            base_lr: 0.02,
            finetune_iterations: 1000,
            finetune_lr: 0.01,
            batch_size: 64,
            fg_fraction: 0.25,
            momentum: 0.9,
            weight_decay: 1e-4,
            variant: FinetuneVariant::LpFtGdl,
            lp_fraction: 0.5,
            gdl_scale: 0.001,
            use_cwsc: true,
            wa_step: 100,
            fingerprint: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.embed_dim == 0 || self.batch_size == 0 || self.wa_step == 0 {
            return Err(FoodError::Config(
                "embed_dim, batch_size and wa_step must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(FoodError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        for (name, lr) in [("base_lr", self.base_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(FoodError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.lp_fraction) {
            return Err(FoodError::Config(
                "fg_fraction and lp_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.gdl_scale < 0.0 {
            return Err(FoodError::Config(
                "momentum must lie in [0, 1); weight_decay and gdl_scale >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Trunk entries `N(0, 1/D0)`, zero bias, classifier entries `N(0, 1/D)`.
/// Placeholder columns are initialized like the others.
pub fn init_params(input_dim: usize, num_known: usize, config: &TrainConfig, rng: &mut Rng) -> Result<HeadParams> {
    if input_dim == 0 || num_known == 0 {
        return Err(FoodError::Config("input_dim and num_known must be positive".into()));
    }
    let d = config.embed_dim;
    let s0 = (1.0 / input_dim as f64).sqrt();
    let trunk_w = Mat64::from_fn(input_dim, d, |_, _| s0 * rng.normal());
    let s1 = (1.0 / d as f64).sqrt();
    let w = Mat64::from_fn(d, num_known + 2, |_, _| s1 * rng.normal());
    let classifier = ClassifierWeights::new(w, config.alpha)?;
    HeadParams::new(trunk_w, vec![0.0; d], classifier, config.hyper.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub stage: Stage,
    pub iteration: u64,
    pub fingerprint: u64,
}

/// Checkpoints sampled every `step` fine-tuning iterations, ending with the
/// final checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub step: usize,
    pub checkpoints: Vec<Checkpoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }
}

struct StagePlan {
    stage: Stage,
    iterations: usize,
    trunk_scale: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    params: &mut HeadParams,
    opt: &mut OptimState,
    sampler: &BatchSampler<'_>,
    config: &TrainConfig,
    plan: &StagePlan,
    use_mask: bool,
    rng: &mut Rng,
    mut on_iter: impl FnMut(usize, f64, &HeadParams),
) -> Result<()> {
    let scale = GradScale {
        trunk: plan.trunk_scale,
        head: 1.0,
    };
    for it in 0..plan.iterations {
        let batch = sampler.sample(config.batch_size, config.fg_fraction, rng)?;
        let mask = if use_mask {
            Some(sample_mask(
                params.hyper.p_hat,
                params.embed_dim(),
                params.num_outputs(),
                rng,
            )?)
        } else {
            None
        };
        let out = total_loss_grad(&batch, params, mask.as_ref())?;
        sgd_step(params, &out.grads, opt, scale)?;
        if it % 200 == 0 {
            debug!(
                stage = plan.stage.name(),
                it,
                loss = out.loss,
                ce = out.diagnostics.ce,
                unknown = out.diagnostics.unknown,
                "train"
            );
        }
        on_iter(it, out.loss, params);
    }
    Ok(())
}

/// Base training on base-class and background proposals. CWSC masking is
/// off; UDL follows `config.hyper.use_udl`.
pub fn train_base(
    split: &[Proposal],
    input_dim: usize,
    num_known: usize,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<Checkpoint> {
    train_base_logged(split, input_dim, num_known, config, rng).map(|(c, _)| c)
}

/// As [`train_base`], also returning the per-iteration training loss.
pub fn train_base_logged(
    split: &[Proposal],
    input_dim: usize,
    num_known: usize,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Checkpoint, Vec<f64>)> {
    config.validate()?;
    if split.is_empty() {
        return Err(FoodError::Config("base training split is empty".into()));
    }
    check_training_split(split)?;
    if split.iter().any(|p| p.feature.len() != input_dim) {
        return Err(FoodError::DimensionMismatch {
            expected: input_dim,
            got: split
                .iter()
                .find(|p| p.feature.len() != input_dim)
                .map_or(0, |p| p.feature.len()),
        });
    }
    let mut params = init_params(input_dim, num_known, config, rng)?;
    if config.base_iterations == 0 {
        return Ok((
            Checkpoint {
                params,
                stage: Stage::Init,
                iteration: 0,
                fingerprint: config.fingerprint,
            },
            Vec::new(),
        ));
    }
    let sampler = BatchSampler::new(split, num_known)?;
    let mut opt = OptimState::new(&params, config.base_lr, config.momentum, config.weight_decay)?;
    let plan = StagePlan {
        stage: Stage::Base,
        iterations: config.base_iterations,
        trunk_scale: 1.0,
    };
    let mut losses = Vec::with_capacity(config.base_iterations);
    run_stage(&mut params, &mut opt, &sampler, config, &plan, false, rng, |_, l, _| {
        losses.push(l)
    })?;
    info!(
        iterations = config.base_iterations,
        final_loss = losses.last().copied(),
        "base training done"
    );
    Ok((
        Checkpoint {
            params,
            stage: Stage::Base,
            iteration: config.base_iterations as u64,
            fingerprint: config.fingerprint,
        },
        losses,
    ))
}

/// Few-shot fine-tuning of a base checkpoint. The variant decides the
/// stages: an optional head-only linear probe (trunk scale 0) followed by
/// a stage where the trunk trains at scale 1 (`ft`) or `gdl_scale`
/// (`*-gdl`). The trajectory samples the last stage every `wa_step`
/// iterations and ends with the final checkpoint.
pub fn finetune(
    ckpt: &Checkpoint,
    split: &[Proposal],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Checkpoint, Trajectory)> {
    config.validate()?;
    match ckpt.stage {
        Stage::Base | Stage::Init => {}
        other => return Err(FoodError::StageOrder(other.name().into())),
    }
    if split.is_empty() {
        return Err(FoodError::Config("few-shot split is empty".into()));
    }
    let mut params = ckpt.params.clone();
    // Loss settings come from the fine-tuning config, not from the base run.
    params.hyper = config.hyper.clone();
    let num_known = params.num_known();
    let sampler = BatchSampler::new(split, num_known)?;
    let mut opt = OptimState::new(&params, config.finetune_lr, config.momentum, config.weight_decay)?;

    let total = config.finetune_iterations;
    let lp_iters = (config.lp_fraction * total as f64).round() as usize;
    let plans = match config.variant {
        FinetuneVariant::Lp => vec![(Stage::LinearProbe, total, 0.0)],
        FinetuneVariant::Ft => vec![(Stage::Finetune, total, 1.0)],
        FinetuneVariant::FtGdl => vec![(Stage::Finetune, total, config.gdl_scale)],
        FinetuneVariant::LpFt => vec![
            (Stage::LinearProbe, lp_iters, 0.0),
            (Stage::Finetune, total - lp_iters, 1.0),
        ],
        FinetuneVariant::LpFtGdl => vec![
            (Stage::LinearProbe, lp_iters, 0.0),
            (Stage::Finetune, total - lp_iters, config.gdl_scale),
        ],
    };
    let last = plans.len() - 1;
    let mut done = 0u64;
    let mut traj = Trajectory {
        step: config.wa_step,
        checkpoints: Vec::new(),
    };
    let mut final_stage = ckpt.stage;
    for (i, (stage, iterations, trunk_scale)) in plans.into_iter().enumerate() {
        if iterations == 0 {
            continue;
        }
        let plan = StagePlan {
            stage,
            iterations,
            trunk_scale,
        };
        let record = i == last;
        let base_iter = done;
        let step = config.wa_step;
        let fp = config.fingerprint;
        run_stage(
            &mut params,
            &mut opt,
            &sampler,
            config,
            &plan,
            config.use_cwsc,
            rng,
            |it, _, p| {
                let local = it + 1;
                if record && local % step == 0 && local < iterations {
                    traj.checkpoints.push(Checkpoint {
                        params: p.clone(),
                        stage,
                        iteration: base_iter + local as u64,
                        fingerprint: fp,
                    });
                }
            },
        )?;
        done += iterations as u64;
        final_stage = stage;
        info!(stage = stage.name(), iterations, trunk_scale, "fine-tune stage done");
    }
    let final_ckpt = Checkpoint {
        params,
        stage: if final_stage == Stage::Base || final_stage == Stage::Init {
            Stage::Finetune
        } else {
            final_stage
        },
        iteration: done,
        fingerprint: config.fingerprint,
    };
    traj.checkpoints.push(final_ckpt.clone());
    Ok((final_ckpt, traj))
}

/// Elementwise mean of every checkpoint in the trajectory.
pub fn weight_average(traj: &Trajectory) -> Result<Checkpoint> {
    let last = traj.checkpoints.last().ok_or(FoodError::EmptyTrajectory)?;
    let n = last.params.num_parameters();
    let mut sum = vec![0.0; n];
    for c in &traj.checkpoints {
        let flat = c.params.flatten();
        if flat.len() != n {
            return Err(FoodError::ShapeMismatch("trajectory"));
        }
        for (s, v) in sum.iter_mut().zip(&flat) {
            *s += v;
        }
    }
    let h = traj.checkpoints.len() as f64;
    for s in &mut sum {
        *s /= h;
    }
    Ok(Checkpoint {
        params: last.params.with_flat(&sum)?,
        stage: Stage::Averaged,
        iteration: last.iteration,
        fingerprint: last.fingerprint,
    })
}

/// Fraction of foreground proposals whose dense MSP prediction over the
/// known slots matches their class. `filter` picks which classes count.
pub fn known_accuracy(params: &HeadParams, split: &[Proposal], filter: impl Fn(usize) -> bool) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for p in split {
        let Some(c) = p.role.known_class() else { continue };
        if !filter(c) {
            continue;
        }
        let logits = crate::head::dense_logits(&p.feature, params)?;
        let pred = crate::numerics::argmax(&logits[..params.num_known()]).unwrap_or(usize::MAX);
        total += 1;
        hits += (pred == c) as usize;
    }
    if total == 0 {
        return Err(FoodError::EmptySplit("no proposals for the requested classes".into()));
    }
    Ok(hits as f64 / total as f64)
}

// ---- binary checkpoint format ----

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_group(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn hyper_codes(h: &Hyper) -> [f64; 9] {
    [
        h.p_hat,
        h.delta1,
        h.delta2,
        h.lambda,
        h.n_pos as f64,
        h.n_neg as f64,
        h.sampling_rule.code() as f64,
        match h.unknown_loss {
            UnknownLoss::Sigmoid => 0.0,
            UnknownLoss::Softmax => 1.0,
        },
        h.use_udl as u8 as f64,
    ]
}

fn hyper_from_codes(v: &[f64]) -> Result<Hyper> {
    let count = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
            Ok(x as usize)
        } else {
            Err(FoodError::Format(format!("checkpoint: invalid count {x}")))
        }
    };
    Ok(Hyper {
        p_hat: v[0],
        delta1: v[1],
        delta2: v[2],
        lambda: v[3],
        n_pos: count(v[4])?,
        n_neg: count(v[5])?,
        sampling_rule: SamplingRule::from_code(count(v[6])? as u8)?,
        unknown_loss: match count(v[7])? {
            0 => UnknownLoss::Sigmoid,
            1 => UnknownLoss::Softmax,
            c => return Err(FoodError::Format(format!("checkpoint: unknown loss code {c}"))),
        },
        use_udl: count(v[8])? != 0,
    })
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, ckpt.stage.tag());
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());
    out.extend_from_slice(&ckpt.fingerprint.to_le_bytes());
    put_u32(&mut out, 5);
    put_group(
        &mut out,
        "trunk.weight",
        &[p.trunk_w.rows(), p.trunk_w.cols()],
        p.trunk_w.as_slice(),
    );
    put_group(&mut out, "trunk.bias", &[p.trunk_b.len()], &p.trunk_b);
    let w = p.classifier.w();
    put_group(&mut out, "classifier.weight", &[w.rows(), w.cols()], w.as_slice());
    put_group(&mut out, "classifier.alpha", &[1], &[p.classifier.alpha()]);
    put_group(&mut out, "hyper", &[9], &hyper_codes(&p.hyper));
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| FoodError::Format("checkpoint: truncated".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn group(&mut self, expected: &str) -> Result<(Vec<usize>, Vec64)> {
        let len = self.u32()? as usize;
        if len > 256 {
            return Err(FoodError::Format("checkpoint: group name too long".into()));
        }
        let mut name = vec![0u8; len];
        self.0
            .read_exact(&mut name)
            .map_err(|_| FoodError::Format("checkpoint: truncated".into()))?;
        if name != expected.as_bytes() {
            return Err(FoodError::Format(format!(
                "checkpoint: expected group `{expected}`, found `{}`",
                String::from_utf8_lossy(&name)
            )));
        }
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(FoodError::Format("checkpoint: bad rank".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if count > remaining / 8 {
            return Err(FoodError::Format("checkpoint: truncated".into()));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = f64::from_le_bytes(self.bytes()?);
            if !v.is_finite() {
                return Err(FoodError::Format(format!(
                    "checkpoint: non-finite value in `{expected}`"
                )));
            }
            data.push(v);
        }
        Ok((shape, data))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(FoodError::Format("checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FoodError::Format(format!(
            "checkpoint: version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let stage = Stage::from_tag(r.u32()?)?;
    let iteration = r.u64()?;
    let fingerprint = r.u64()?;
    if r.u32()? != 5 {
        return Err(FoodError::Format("checkpoint: expected 5 parameter groups".into()));
    }
    let shape_err = || FoodError::Format("checkpoint: bad group shape".into());
    let (s, tw) = r.group("trunk.weight")?;
    let [d0, d] = s[..] else { return Err(shape_err()) };
    let (s, tb) = r.group("trunk.bias")?;
    if s != [d] {
        return Err(shape_err());
    }
    let (s, w) = r.group("classifier.weight")?;
    let [wd, c] = s[..] else { return Err(shape_err()) };
    let (s, alpha) = r.group("classifier.alpha")?;
    if s != [1] {
        return Err(shape_err());
    }
    let (s, hyper) = r.group("hyper")?;
    if s != [9] {
        return Err(shape_err());
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(FoodError::Format("checkpoint: trailing bytes".into()));
    }
    let classifier = ClassifierWeights::new(Mat64::from_vec(wd, c, w)?, alpha[0])?;
    let params = HeadParams::new(Mat64::from_vec(d0, d, tw)?, tb, classifier, hyper_from_codes(&hyper)?)?;
    Ok(Checkpoint {
        params,
        stage,
        iteration,
        fingerprint,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
