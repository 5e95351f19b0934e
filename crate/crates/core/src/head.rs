//! The full detection head: affine+ReLU trunk adapter feeding the sparsified
//! cosine classifier, trained with cross-entropy plus the unknown decoupling
//! loss, and queried with max-softmax-probability inference.
//!
//! The region-proposal and box-regression losses of a full detector have no
//! counterpart here; the head only sees proposal feature vectors.

use std::fmt;
use std::str::FromStr;

use crate::cwsc::{ClassifierWeights, PreparedClassifier, SparsityMask};
use crate::error::{FoodError, Result};
use crate::numerics::{argmax, log_sum_exp, norm, softmax, Mat64, Vec64, ZERO_NORM};
use crate::udl::{
    select_pseudo_unknowns_by, unknown_loss_grad_full, unknown_softmax_loss_grad, PseudoUnknownSelection, SamplingRule,
};

/// Label marker for held-out unknown proposals; never valid in training.
pub const HELD_OUT_UNKNOWN: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownLoss {
    /// Sigmoid on the unknown logit only (decoupled).
    Sigmoid,
    /// Softmax cross-entropy towards the unknown slot (ablation).
    Softmax,
}

impl UnknownLoss {
    pub fn name(self) -> &'static str {
        match self {
            UnknownLoss::Sigmoid => "sigmoid",
            UnknownLoss::Softmax => "softmax",
        }
    }
}

impl fmt::Display for UnknownLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnknownLoss {
    type Err = FoodError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sigmoid" => Ok(UnknownLoss::Sigmoid),
            "softmax" => Ok(UnknownLoss::Softmax),
            other => Err(FoodError::Config(format!(
                "unknown_loss must be sigmoid or softmax, got `{other}`"
            ))),
        }
    }
}

/// Loss hyperparameters carried alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub p_hat: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub lambda: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub sampling_rule: SamplingRule,
    pub unknown_loss: UnknownLoss,
    pub use_udl: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            p_hat: 0.6,
            delta1: 0.09,
            delta2: 0.09,
            lambda: 1.0,
            n_pos: 3,
            n_neg: 12,
            sampling_rule: SamplingRule::MaxCondEnergy,
            unknown_loss: UnknownLoss::Sigmoid,
            use_udl: true,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.p_hat, self.delta1, self.delta2, self.lambda]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(FoodError::Config("hyperparameters must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.p_hat) {
            return Err(FoodError::InvalidProbability(self.p_hat));
        }
        if self.lambda < 0.0 {
            return Err(FoodError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for d in [self.delta1, self.delta2] {
            if !(d > 0.0) {
                return Err(FoodError::NonPositiveSlope(d));
            }
        }
        Ok(())
    }
}

/// Trainable head: trunk `D0 x D` plus bias, classifier `D x (K+2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub trunk_w: Mat64,
    pub trunk_b: Vec64,
    pub classifier: ClassifierWeights,
    pub hyper: Hyper,
}

impl HeadParams {
    pub fn new(trunk_w: Mat64, trunk_b: Vec64, classifier: ClassifierWeights, hyper: Hyper) -> Result<Self> {
        if trunk_w.rows() == 0 || trunk_w.cols() == 0 {
            return Err(FoodError::ShapeMismatch("trunk.weight"));
        }
        if trunk_b.len() != trunk_w.cols() {
            return Err(FoodError::ShapeMismatch("trunk.bias"));
        }
        if classifier.dim() != trunk_w.cols() {
            return Err(FoodError::ShapeMismatch("classifier.weight"));
        }
        hyper.validate()?;
        Ok(Self {
            trunk_w,
            trunk_b,
            classifier,
            hyper,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk_w.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.trunk_w.cols()
    }

    pub fn num_known(&self) -> usize {
        self.classifier.num_known()
    }

    pub fn num_outputs(&self) -> usize {
        self.classifier.num_outputs()
    }

    pub fn unknown_index(&self) -> usize {
        self.classifier.unknown_index()
    }

    pub fn background_index(&self) -> usize {
        self.classifier.background_index()
    }

    /// Trunk weights, trunk bias, then classifier weights, each row-major.
    pub fn flatten(&self) -> Vec64 {
        let mut v = Vec::with_capacity(self.num_parameters());
        v.extend_from_slice(self.trunk_w.as_slice());
        v.extend_from_slice(&self.trunk_b);
        v.extend_from_slice(self.classifier.w().as_slice());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.trunk_w.as_slice().len() + self.trunk_b.len() + self.classifier.w().as_slice().len()
    }

    /// Copy of `self` with parameters taken from a [`Self::flatten`] layout.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_parameters() {
            return Err(FoodError::DimensionMismatch {
                expected: self.num_parameters(),
                got: flat.len(),
            });
        }
        let (tw, rest) = flat.split_at(self.trunk_w.as_slice().len());
        let (tb, cw) = rest.split_at(self.trunk_b.len());
        let (d0, d) = self.trunk_w.shape();
        let (cd, cc) = self.classifier.w().shape();
        let classifier = ClassifierWeights::new(Mat64::from_vec(cd, cc, cw.to_vec())?, self.classifier.alpha())?;
        Ok(Self {
            trunk_w: Mat64::from_vec(d0, d, tw.to_vec())?,
            trunk_b: tb.to_vec(),
            classifier,
            hyper: self.hyper.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// One batch of proposals. Labels are output slots: known classes `0..K`,
/// background `K+1`, or [`HELD_OUT_UNKNOWN`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub features: Mat64,
    pub labels: Vec<usize>,
    pub fg: Vec<bool>,
}

impl ProposalBatch {
    pub fn new(features: Mat64, labels: Vec<usize>, fg: Vec<bool>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(FoodError::EmptyInput);
        }
        if labels.len() != features.rows() || fg.len() != features.rows() {
            return Err(FoodError::DimensionMismatch {
                expected: features.rows(),
                got: labels.len().min(fg.len()),
            });
        }
        Ok(Self { features, labels, fg })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub trunk_w: Mat64,
    pub trunk_b: Vec64,
    /// Gradient w.r.t. the raw classifier weights.
    pub classifier: Mat64,
    /// Gradient w.r.t. the normalized classifier weights; zero at masked
    /// entries.
    pub classifier_unit: Mat64,
}

impl HeadGrads {
    pub fn zeros_like(params: &HeadParams) -> Self {
        let (d0, d) = params.trunk_w.shape();
        let (cd, cc) = params.classifier.w().shape();
        Self {
            trunk_w: Mat64::zeros(d0, d),
            trunk_b: vec![0.0; d],
            classifier: Mat64::zeros(cd, cc),
            classifier_unit: Mat64::zeros(cd, cc),
        }
    }

    /// Same layout as [`HeadParams::flatten`].
    pub fn flatten(&self) -> Vec64 {
        let mut v = self.trunk_w.as_slice().to_vec();
        v.extend_from_slice(&self.trunk_b);
        v.extend_from_slice(self.classifier.as_slice());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub ce: f64,
    /// Unweighted unknown loss (before multiplying by lambda).
    pub unknown: f64,
    pub selection: PseudoUnknownSelection,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: HeadGrads,
    pub diagnostics: Diagnostics,
}

struct TrunkOut {
    pre: Vec64,
    unit: Vec64,
    norm: f64,
}

fn trunk_forward(params: &HeadParams, x: &[f64]) -> TrunkOut {
    let mut pre = params.trunk_w.vec_mul(x);
    for (p, b) in pre.iter_mut().zip(&params.trunk_b) {
        *p += b;
    }
    let h: Vec64 = pre.iter().map(|v| v.max(0.0)).collect();
    let n = norm(&h);
    let unit = if n >= ZERO_NORM {
        h.iter().map(|v| v / n).collect()
    } else {
        Vec::new()
    };
    TrunkOut { pre, unit, norm: n }
}

/// Training objective: mean cross-entropy over every proposal (true labels,
/// background included) plus `lambda` times the unknown loss on the mined
/// pseudo-unknowns, with gradients for every parameter group.
///
/// A proposal whose trunk output is exactly zero gets all-zero logits and
/// passes no gradient.
pub fn total_loss_grad(batch: &ProposalBatch, params: &HeadParams, mask: Option<&SparsityMask>) -> Result<LossOutput> {
    loss_grad_impl(batch, params, mask, None)
}

/// [`total_loss_grad`] with the pseudo-unknown selection held fixed instead
/// of re-mined from the logits. Top-k selection is piecewise constant, so
/// this is the form to differentiate numerically.
pub fn total_loss_grad_fixed_selection(
    batch: &ProposalBatch,
    params: &HeadParams,
    mask: Option<&SparsityMask>,
    selection: &PseudoUnknownSelection,
) -> Result<LossOutput> {
    loss_grad_impl(batch, params, mask, Some(selection))
}

fn loss_grad_impl(
    batch: &ProposalBatch,
    params: &HeadParams,
    mask: Option<&SparsityMask>,
    fixed: Option<&PseudoUnknownSelection>,
) -> Result<LossOutput> {
    let classes = params.num_outputs();
    let unknown = params.unknown_index();
    if batch.features.cols() != params.input_dim() {
        return Err(FoodError::DimensionMismatch {
            expected: params.input_dim(),
            got: batch.features.cols(),
        });
    }
    for &label in &batch.labels {
        if label == HELD_OUT_UNKNOWN || label == unknown {
            return Err(FoodError::UnknownLabelInTraining);
        }
        if label >= classes {
            return Err(FoodError::LabelOutOfRange { label, classes });
        }
    }

    let prepared = PreparedClassifier::new(&params.classifier, mask)?;
    let n = batch.len();
    let trunk: Vec<TrunkOut> = (0..n).map(|i| trunk_forward(params, batch.features.row(i))).collect();
    let logits: Vec<Vec64> = trunk
        .iter()
        .map(|t| {
            if t.unit.is_empty() {
                vec![0.0; classes]
            } else {
                prepared.logits_unit(&t.unit)
            }
        })
        .collect();

    let inv_n = 1.0 / n as f64;
    let mut ce = 0.0;
    let mut dlogits: Vec<Vec64> = Vec::with_capacity(n);
    for (l, &label) in logits.iter().zip(&batch.labels) {
        ce += inv_n * (log_sum_exp(l)? - l[label]);
        let mut d = softmax(l)?;
        d[label] -= 1.0;
        d.iter_mut().for_each(|v| *v *= inv_n);
        dlogits.push(d);
    }

    let hyper = &params.hyper;
    let mut unknown_loss = 0.0;
    let selection = match fixed {
        Some(sel) => sel.clone(),
        None if hyper.use_udl => {
            let fg_pool: Vec<usize> = (0..n).filter(|&i| batch.fg[i]).collect();
            let bg_pool: Vec<usize> = (0..n).filter(|&i| !batch.fg[i]).collect();
            select_pseudo_unknowns_by(
                hyper.sampling_rule,
                &logits,
                &fg_pool,
                &bg_pool,
                hyper.n_pos,
                hyper.n_neg,
                unknown,
            )?
        }
        None => PseudoUnknownSelection::default(),
    };
    if hyper.use_udl && !selection.is_empty() {
        let term = match hyper.unknown_loss {
            UnknownLoss::Sigmoid => unknown_loss_grad_full(&selection, &logits, unknown, hyper.delta1, hyper.delta2)?,
            UnknownLoss::Softmax => unknown_softmax_loss_grad(&selection, &logits, unknown)?,
        };
        unknown_loss = term.loss;
        if hyper.lambda != 0.0 {
            for (d, g) in dlogits.iter_mut().zip(&term.grad) {
                for (dc, gc) in d.iter_mut().zip(g) {
                    if *gc != 0.0 {
                        *dc += hyper.lambda * gc;
                    }
                }
            }
        }
    }
    let loss = ce + hyper.lambda * unknown_loss;
    if !loss.is_finite() {
        return Err(FoodError::NumericFailure("loss evaluation".into()));
    }

    let mut grads = HeadGrads::zeros_like(params);
    let mut unit_acc = Mat64::zeros(prepared.dim(), prepared.num_outputs());
    for (i, (t, d)) in trunk.iter().zip(&dlogits).enumerate() {
        if t.unit.is_empty() {
            continue;
        }
        let grad_h = prepared.backward(&t.unit, t.norm, d, &mut unit_acc);
        let x = batch.features.row(i);
        for (j, (gh, pre)) in grad_h.iter().zip(&t.pre).enumerate() {
            if *pre <= 0.0 {
                continue;
            }
            grads.trunk_b[j] += gh;
            for (r, xr) in x.iter().enumerate() {
                grads.trunk_w[(r, j)] += xr * gh;
            }
        }
    }
    let (grad_w, grad_unit) = prepared.finish(unit_acc);
    grads.classifier = grad_w;
    grads.classifier_unit = grad_unit;

    Ok(LossOutput {
        loss,
        grads,
        diagnostics: Diagnostics {
            ce,
            unknown: unknown_loss,
            selection,
        },
    })
}

/// Dense (maskless) logits of one raw feature.
pub fn dense_logits(feature: &[f64], params: &HeadParams) -> Result<Vec64> {
    if feature.len() != params.input_dim() {
        return Err(FoodError::DimensionMismatch {
            expected: params.input_dim(),
            got: feature.len(),
        });
    }
    if !(norm(feature) >= ZERO_NORM) {
        return Err(FoodError::ZeroFeature);
    }
    let t = trunk_forward(params, feature);
    if t.unit.is_empty() {
        return Ok(vec![0.0; params.num_outputs()]);
    }
    let prepared = PreparedClassifier::new(&params.classifier, None)?;
    Ok(prepared.logits_unit(&t.unit))
}

/// Max-softmax-probability prediction over all `K+2` slots. With
/// `exclude_unknown` the unknown slot is dropped before the softmax, so it
/// can never be predicted.
pub fn msp_predict(feature: &[f64], params: &HeadParams, exclude_unknown: bool) -> Result<(usize, f64)> {
    let logits = dense_logits(feature, params)?;
    Ok(msp_from_logits(&logits, params.unknown_index(), exclude_unknown))
}

pub(crate) fn msp_from_logits(logits: &[f64], unknown: usize, exclude_unknown: bool) -> (usize, f64) {
    let slots: Vec<usize> = (0..logits.len())
        .filter(|&c| !(exclude_unknown && c == unknown))
        .collect();
    let kept: Vec64 = slots.iter().map(|&c| logits[c]).collect();
    let probs = softmax(&kept).expect("at least one slot");
    let best = argmax(&probs).expect("non-empty");
    (slots[best], probs[best])
}
