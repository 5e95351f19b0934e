//! Class-weight-sparsification cosine classifier.
//!
//! Logits are `alpha * <x/|x|, R * (w_c/|w_c|)>`: the binary mask `R` acts on
//! the *normalized* class weights, so every logit stays inside
//! `[-alpha, alpha]` with or without sparsification. Inference uses the
//! dense path (no mask).
//!
//! The module also carries the ridge-regression view of sparsification as a
//! pair of independent routes: the closed form and a Monte-Carlo estimate of
//! the expected masked objective.

use serde::{Deserialize, Serialize};

use crate::error::{FoodError, Result};
use crate::numerics::{dot, l2_normalize, log_sum_exp, norm, sample_subset, softmax, Mat64, Rng, Vec64, ZERO_NORM};

/// Classifier weight matrix `D x (K+2)` and temperature.
///
/// Column layout: `0..B` base, `B..K` novel, `K` the unknown placeholder and
/// `K+1` background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    w: Mat64,
    alpha: f64,
}

impl ClassifierWeights {
    pub fn new(w: Mat64, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(FoodError::InvalidWeights(format!(
                "temperature {alpha} must be positive"
            )));
        }
        if w.cols() < 3 || w.rows() == 0 {
            return Err(FoodError::InvalidWeights(format!(
                "need at least one known class plus unknown and background columns, got shape {:?}",
                w.shape()
            )));
        }
        if let Some(c) = (0..w.cols()).find(|&c| !(w.col_norm(c) >= ZERO_NORM)) {
            return Err(FoodError::InvalidWeights(format!("column {c} has zero norm")));
        }
        Ok(Self { w, alpha })
    }

    pub fn w(&self) -> &Mat64 {
        &self.w
    }

    pub(crate) fn w_mut(&mut self) -> &mut Mat64 {
        &mut self.w
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn num_outputs(&self) -> usize {
        self.w.cols()
    }

    pub fn num_known(&self) -> usize {
        self.w.cols() - 2
    }

    pub fn unknown_index(&self) -> usize {
        self.num_known()
    }

    pub fn background_index(&self) -> usize {
        self.num_known() + 1
    }
}

/// Binary retention mask over the classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    r: Mat64,
    n: usize,
    p_hat: f64,
}

impl SparsityMask {
    /// iid Bernoulli mask: each entry kept with probability `1 - p_hat`. The
    /// number of ones is whatever the draw produces.
    pub fn bernoulli(p_hat: f64, dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        check_p_hat(p_hat)?;
        let keep = 1.0 - p_hat;
        let r = Mat64::from_fn(dim, num_classes, |_, _| if rng.bernoulli(keep) { 1.0 } else { 0.0 });
        let n = r.as_slice().iter().filter(|v| **v == 1.0).count();
        Ok(Self { r, n, p_hat })
    }

    pub fn from_matrix(r: Mat64) -> Result<Self> {
        if r.as_slice().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(FoodError::Format("mask entries must be 0 or 1".into()));
        }
        let n = r.as_slice().iter().filter(|v| **v == 1.0).count();
        let total = r.rows() * r.cols();
        let p_hat = if total == 0 { 0.0 } else { 1.0 - n as f64 / total as f64 };
        Ok(Self { r, n, p_hat })
    }

    pub fn matrix(&self) -> &Mat64 {
        &self.r
    }

    pub fn ones(&self) -> usize {
        self.n
    }

    pub fn p_hat(&self) -> f64 {
        self.p_hat
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.r[(row, col)] == 1.0
    }
}

fn check_p_hat(p_hat: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p_hat) {
        return Err(FoodError::InvalidProbability(p_hat));
    }
    Ok(())
}

/// Number of retained weights for sparsity probability `p_hat`.
pub fn retained_count(p_hat: f64, dim: usize, num_classes: usize) -> usize {
    ((1.0 - p_hat) * (dim * num_classes) as f64).round() as usize
}

/// Training mask with exactly `round((1 - p_hat) * dim * num_classes)` ones
/// placed uniformly at random.
pub fn sample_mask(p_hat: f64, dim: usize, num_classes: usize, rng: &mut Rng) -> Result<SparsityMask> {
    check_p_hat(p_hat)?;
    let total = dim * num_classes;
    let n = retained_count(p_hat, dim, num_classes);
    let mut r = Mat64::zeros(dim, num_classes);
    for idx in sample_subset(rng, total, n)? {
        r.as_mut_slice()[idx] = 1.0;
    }
    Ok(SparsityMask { r, n, p_hat })
}

/// Normalized, optionally masked classifier columns, prepared once and shared
/// across every proposal of a batch.
#[derive(Debug, Clone)]
pub(crate) struct PreparedClassifier {
    alpha: f64,
    unit: Mat64,
    norms: Vec64,
    effective: Mat64,
    mask: Option<Mat64>,
}

impl PreparedClassifier {
    pub(crate) fn new(weights: &ClassifierWeights, mask: Option<&SparsityMask>) -> Result<Self> {
        let (d, c) = weights.w.shape();
        if let Some(m) = mask {
            if m.r.shape() != (d, c) {
                return Err(FoodError::DimensionMismatch {
                    expected: d * c,
                    got: m.r.rows() * m.r.cols(),
                });
            }
        }
        let norms: Vec64 = (0..c).map(|j| weights.w.col_norm(j)).collect();
        if let Some(j) = norms.iter().position(|n| !(*n >= ZERO_NORM)) {
            return Err(FoodError::InvalidWeights(format!("column {j} collapsed to zero norm")));
        }
        let unit = Mat64::from_fn(d, c, |i, j| weights.w[(i, j)] / norms[j]);
        let effective = match mask {
            Some(m) => Mat64::from_fn(d, c, |i, j| unit[(i, j)] * m.r[(i, j)]),
            None => unit.clone(),
        };
        Ok(Self {
            alpha: weights.alpha,
            unit,
            norms,
            effective,
            mask: mask.map(|m| m.r.clone()),
        })
    }

    pub(crate) fn dim(&self) -> usize {
        self.unit.rows()
    }

    pub(crate) fn num_outputs(&self) -> usize {
        self.unit.cols()
    }

    /// Logits for an already-normalized feature.
    pub(crate) fn logits_unit(&self, x_unit: &[f64]) -> Vec64 {
        self.effective
            .vec_mul(x_unit)
            .into_iter()
            .map(|v| self.alpha * v)
            .collect()
    }

    /// Backpropagates `dlogits` for one feature. Accumulates the gradient
    /// w.r.t. the unmasked unit weights into `unit_acc` (the mask is applied
    /// in [`Self::finish`]) and returns the gradient w.r.t. the raw feature.
    pub(crate) fn backward(&self, x_unit: &[f64], x_norm: f64, dlogits: &[f64], unit_acc: &mut Mat64) -> Vec64 {
        let grad_unit_x: Vec64 = self
            .effective
            .mul_vec(dlogits)
            .into_iter()
            .map(|v| self.alpha * v)
            .collect();
        for (i, xi) in x_unit.iter().enumerate() {
            let scaled = self.alpha * xi;
            for (j, g) in dlogits.iter().enumerate() {
                unit_acc[(i, j)] += scaled * g;
            }
        }
        project_out(x_unit, x_norm, &grad_unit_x)
    }

    /// Applies the mask to the accumulated unit-weight gradient and maps it
    /// through each column's normalization Jacobian.
    /// Returns `(grad wrt raw weights, grad wrt unit weights)`.
    pub(crate) fn finish(&self, mut unit_acc: Mat64) -> (Mat64, Mat64) {
        if let Some(m) = &self.mask {
            for (g, r) in unit_acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
                if *r == 0.0 {
                    *g = 0.0;
                }
            }
        }
        let (d, c) = unit_acc.shape();
        let mut grad_w = Mat64::zeros(d, c);
        for j in 0..c {
            let proj: f64 = (0..d).map(|i| self.unit[(i, j)] * unit_acc[(i, j)]).sum();
            for i in 0..d {
                grad_w[(i, j)] = (unit_acc[(i, j)] - self.unit[(i, j)] * proj) / self.norms[j];
            }
        }
        (grad_w, unit_acc)
    }
}

/// Gradient of `v/|v|` pulled back: `(g - u (u.g)) / |v|`.
pub(crate) fn project_out(unit: &[f64], length: f64, g: &[f64]) -> Vec64 {
    let proj = dot(unit, g);
    unit.iter().zip(g).map(|(u, gi)| (gi - u * proj) / length).collect()
}

pub(crate) fn normalize_feature(x: &[f64]) -> Result<(Vec64, f64)> {
    let n = norm(x);
    let unit = l2_normalize(x).map_err(|_| FoodError::ZeroFeature)?;
    Ok((unit, n))
}

/// Class logits of one feature. With `mask = None` this is the dense cosine
/// logit used at inference.
pub fn forward_logits(x: &[f64], weights: &ClassifierWeights, mask: Option<&SparsityMask>) -> Result<Vec64> {
    if x.len() != weights.dim() {
        return Err(FoodError::DimensionMismatch {
            expected: weights.dim(),
            got: x.len(),
        });
    }
    let prepared = PreparedClassifier::new(weights, mask)?;
    let (x_unit, _) = normalize_feature(x)?;
    Ok(prepared.logits_unit(&x_unit))
}

#[derive(Debug, Clone)]
pub struct CeGrad {
    pub loss: f64,
    pub logits: Vec64,
    /// Gradient w.r.t. the raw weights `w`.
    pub grad_w: Mat64,
    /// Gradient w.r.t. the normalized weights `w_c/|w_c|`; exactly zero at
    /// masked entries.
    pub grad_w_unit: Mat64,
    pub grad_x: Vec64,
}

/// Softmax cross-entropy of one feature against `label` with analytic
/// gradients through both normalizations and the mask.
pub fn ce_loss_grad(
    x: &[f64],
    weights: &ClassifierWeights,
    mask: Option<&SparsityMask>,
    label: usize,
) -> Result<CeGrad> {
    let classes = weights.num_outputs();
    if label >= classes {
        return Err(FoodError::LabelOutOfRange { label, classes });
    }
    if x.len() != weights.dim() {
        return Err(FoodError::DimensionMismatch {
            expected: weights.dim(),
            got: x.len(),
        });
    }
    let prepared = PreparedClassifier::new(weights, mask)?;
    let (x_unit, x_norm) = normalize_feature(x)?;
    let logits = prepared.logits_unit(&x_unit);
    let loss = log_sum_exp(&logits)? - logits[label];
    let mut dlogits = softmax(&logits)?;
    dlogits[label] -= 1.0;
    let mut acc = Mat64::zeros(prepared.dim(), prepared.num_outputs());
    let grad_x = prepared.backward(&x_unit, x_norm, &dlogits, &mut acc);
    let (grad_w, grad_w_unit) = prepared.finish(acc);
    Ok(CeGrad {
        loss,
        logits,
        grad_w,
        grad_w_unit,
        grad_x,
    })
}

/// One instance of the masked least-squares problem whose expectation over
/// iid masks equals a ridge objective.
#[derive(Debug, Clone)]
pub struct RidgeEquivalenceCase {
    y: Vec64,
    x: Mat64,
    w_unit: Vec64,
    alpha: f64,
    p: f64,
    tau: Vec64,
}

impl RidgeEquivalenceCase {
    /// `x` rows are L2-normalized and `w` is normalized on construction; `p`
    /// is the retention probability.
    pub fn new(y: Vec64, x: Mat64, w: &[f64], alpha: f64, p: f64) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(FoodError::DimensionMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        if w.len() != x.cols() {
            return Err(FoodError::DimensionMismatch {
                expected: x.cols(),
                got: w.len(),
            });
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(FoodError::InvalidProbability(p));
        }
        let mut rows = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            rows.push(l2_normalize(x.row(r))?);
        }
        let x = Mat64::from_rows(&rows)?;
        let tau = (0..x.cols()).map(|j| x.col_norm(j)).collect();
        Ok(Self {
            y,
            x,
            w_unit: l2_normalize(w)?,
            alpha,
            p,
            tau,
        })
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &Mat64 {
        &self.x
    }

    pub fn w_unit(&self) -> &[f64] {
        &self.w_unit
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `diag(x^T x)^{1/2}`.
    pub fn tau(&self) -> &[f64] {
        &self.tau
    }
}

/// `|y - alpha p X w|^2 + alpha^2 p (1-p) |tau * w|^2`.
pub fn ridge_closed_form(case: &RidgeEquivalenceCase) -> f64 {
    let ap = case.alpha * case.p;
    let pred = case.x.mul_vec(&case.w_unit);
    let residual: f64 = case.y.iter().zip(&pred).map(|(y, f)| (y - ap * f).powi(2)).sum();
    let reg: f64 = case.tau.iter().zip(&case.w_unit).map(|(t, w)| (t * w).powi(2)).sum();
    residual + case.alpha * case.alpha * case.p * (1.0 - case.p) * reg
}

/// Monte-Carlo mean of `|y - alpha X (r * w)|^2` over iid Bernoulli(p)
/// retention vectors `r`.
pub fn mc_expected_objective(case: &RidgeEquivalenceCase, trials: usize, rng: &mut Rng) -> f64 {
    let (n, d) = case.x.shape();
    // columns of alpha * X * diag(w)
    let scaled = Mat64::from_fn(n, d, |i, j| case.alpha * case.x[(i, j)] * case.w_unit[j]);
    let mut keep = vec![false; d];
    let mut residual = vec![0.0; n];
    let mut total = 0.0;
    for _ in 0..trials.max(1) {
        for k in keep.iter_mut() {
            *k = rng.uniform() < case.p;
        }
        residual.copy_from_slice(&case.y);
        for (i, res) in residual.iter_mut().enumerate() {
            let row = scaled.row(i);
            for (j, kept) in keep.iter().enumerate() {
                if *kept {
                    *res -= row[j];
                }
            }
        }
        total += residual.iter().map(|r| r * r).sum::<f64>();
    }
    total / trials.max(1) as f64
}
