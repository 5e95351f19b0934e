//! Unknown decoupling learner: conditional-energy mining of pseudo-unknown
//! proposals and a sigmoid loss on the unknown logit alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FoodError, Result};
use crate::numerics::{log_sum_exp, softmax, softplus, stable_sigmoid, Vec64};

/// `-log sum_{c != unknown} exp(l_c)`; the background slot is included.
pub fn conditional_energy(logits: &[f64], unknown_index: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(FoodError::EmptyInput);
    }
    if unknown_index >= logits.len() {
        return Err(FoodError::IndexOutOfRange {
            index: unknown_index,
            len: logits.len(),
        });
    }
    let rest: Vec64 = logits
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != unknown_index)
        .map(|(_, l)| *l)
        .collect();
    Ok(-log_sum_exp(&rest)?)
}

/// Ranking rule for pseudo-unknown mining. Every rule maps to a score whose
/// descending order is the rule's preference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingRule {
    MinMaxProb,
    MinUnknownLogit,
    MaxEntropy,
    MaxCondEnergy,
}

impl SamplingRule {
    pub const ALL: [SamplingRule; 4] = [
        SamplingRule::MinMaxProb,
        SamplingRule::MinUnknownLogit,
        SamplingRule::MaxEntropy,
        SamplingRule::MaxCondEnergy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingRule::MinMaxProb => "min_max_prob",
            SamplingRule::MinUnknownLogit => "min_unknown_logit",
            SamplingRule::MaxEntropy => "max_entropy",
            SamplingRule::MaxCondEnergy => "max_cond_energy",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SamplingRule::MinMaxProb => 0,
            SamplingRule::MinUnknownLogit => 1,
            SamplingRule::MaxEntropy => 2,
            SamplingRule::MaxCondEnergy => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.code() == code)
            .ok_or_else(|| FoodError::UnknownRule(code.to_string()))
    }
}

impl fmt::Display for SamplingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingRule {
    type Err = FoodError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.name() == key)
            .ok_or_else(|| FoodError::UnknownRule(s.to_string()))
    }
}

pub fn ablation_score(rule: SamplingRule, logits: &[f64], unknown_index: usize) -> Result<f64> {
    if unknown_index >= logits.len() {
        return Err(FoodError::IndexOutOfRange {
            index: unknown_index,
            len: logits.len(),
        });
    }
    match rule {
        SamplingRule::MinMaxProb => {
            let p = softmax(logits)?;
            Ok(-p.into_iter().fold(f64::MIN, f64::max))
        }
        SamplingRule::MinUnknownLogit => Ok(-logits[unknown_index]),
        SamplingRule::MaxEntropy => {
            let p = softmax(logits)?;
            Ok(-p.iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum::<f64>())
        }
        SamplingRule::MaxCondEnergy => conditional_energy(logits, unknown_index),
    }
}

/// Foreground and background pseudo-unknowns chosen from one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoUnknownSelection {
    /// Indices into the batch, best first.
    pub pos_fg: Vec<usize>,
    pub pos_bg: Vec<usize>,
    /// Ranking score of every proposal in the batch.
    pub energies: Vec64,
}

impl PseudoUnknownSelection {
    pub fn is_empty(&self) -> bool {
        self.pos_fg.is_empty() && self.pos_bg.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pos_fg.len() + self.pos_bg.len()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.pos_fg.iter().chain(&self.pos_bg).copied()
    }
}

/// Indices of `pool` ordered by descending score, ties by ascending index,
/// truncated to `k`.
pub fn top_k(scores: &[f64], pool: &[usize], k: usize) -> Vec<usize> {
    let mut ranked = pool.to_vec();
    ranked.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    ranked.truncate(k);
    ranked
}

/// Top-`n_pos` foreground and top-`n_neg` background proposals by descending
/// conditional energy.
pub fn select_pseudo_unknowns(
    logits: &[Vec64],
    fg_pool: &[usize],
    bg_pool: &[usize],
    n_pos: usize,
    n_neg: usize,
    unknown_index: usize,
) -> Result<PseudoUnknownSelection> {
    select_pseudo_unknowns_by(
        SamplingRule::MaxCondEnergy,
        logits,
        fg_pool,
        bg_pool,
        n_pos,
        n_neg,
        unknown_index,
    )
}

/// As [`select_pseudo_unknowns`], ranking by an arbitrary rule; the pools
/// stay the same, only the score changes.
pub fn select_pseudo_unknowns_by(
    rule: SamplingRule,
    logits: &[Vec64],
    fg_pool: &[usize],
    bg_pool: &[usize],
    n_pos: usize,
    n_neg: usize,
    unknown_index: usize,
) -> Result<PseudoUnknownSelection> {
    if let Some(&bad) = fg_pool.iter().chain(bg_pool).find(|i| **i >= logits.len()) {
        return Err(FoodError::IndexOutOfRange {
            index: bad,
            len: logits.len(),
        });
    }
    let energies = logits
        .iter()
        .map(|l| ablation_score(rule, l, unknown_index))
        .collect::<Result<Vec64>>()?;
    Ok(PseudoUnknownSelection {
        pos_fg: top_k(&energies, fg_pool, n_pos),
        pos_bg: top_k(&energies, bg_pool, n_neg),
        energies,
    })
}

#[derive(Debug, Clone)]
pub struct UnknownLossGrad {
    pub loss: f64,
    /// d loss / d l_U for every proposal; zero for unselected ones.
    pub grad: Vec64,
}

/// Sigmoid unknown loss: mean of `log(1 + exp(-delta * l_U))` over each
/// non-empty pool, the two pool means added. Only the unknown logits enter.
pub fn unknown_loss_grad(
    selection: &PseudoUnknownSelection,
    unknown_logits: &[f64],
    delta1: f64,
    delta2: f64,
) -> Result<UnknownLossGrad> {
    for delta in [delta1, delta2] {
        if !(delta > 0.0) {
            return Err(FoodError::NonPositiveSlope(delta));
        }
    }
    let mut grad = vec![0.0; unknown_logits.len()];
    let mut loss = 0.0;
    for (pool, delta) in [(&selection.pos_fg, delta1), (&selection.pos_bg, delta2)] {
        if pool.is_empty() {
            continue;
        }
        let inv = 1.0 / pool.len() as f64;
        for &i in pool {
            let l = *unknown_logits.get(i).ok_or(FoodError::IndexOutOfRange {
                index: i,
                len: unknown_logits.len(),
            })?;
            loss += inv * softplus(-delta * l);
            grad[i] += -inv * delta * stable_sigmoid(-delta * l);
        }
    }
    Ok(UnknownLossGrad { loss, grad })
}

#[derive(Debug, Clone)]
pub struct FullLogitLossGrad {
    pub loss: f64,
    /// Gradient w.r.t. every logit of every proposal.
    pub grad: Vec<Vec64>,
}

/// [`unknown_loss_grad`] lifted to full logit vectors; every non-unknown
/// slot receives an exact zero.
pub fn unknown_loss_grad_full(
    selection: &PseudoUnknownSelection,
    logits: &[Vec64],
    unknown_index: usize,
    delta1: f64,
    delta2: f64,
) -> Result<FullLogitLossGrad> {
    let unknown: Vec64 = logits.iter().map(|l| l[unknown_index]).collect();
    let g = unknown_loss_grad(selection, &unknown, delta1, delta2)?;
    let grad = logits
        .iter()
        .zip(&g.grad)
        .map(|(l, gu)| {
            let mut row = vec![0.0; l.len()];
            row[unknown_index] = *gu;
            row
        })
        .collect();
    Ok(FullLogitLossGrad { loss: g.loss, grad })
}

/// Softmax variant of the unknown loss, kept as the ablation contrast:
/// `-mean log softmax(l)[U]` over all selected proposals. Its gradient
/// reaches every class logit.
pub fn unknown_softmax_loss_grad(
    selection: &PseudoUnknownSelection,
    logits: &[Vec64],
    unknown_index: usize,
) -> Result<FullLogitLossGrad> {
    let mut grad: Vec<Vec64> = logits.iter().map(|l| vec![0.0; l.len()]).collect();
    if selection.is_empty() {
        return Ok(FullLogitLossGrad { loss: 0.0, grad });
    }
    let inv = 1.0 / selection.len() as f64;
    let mut loss = 0.0;
    for i in selection.indices() {
        let l = logits.get(i).ok_or(FoodError::IndexOutOfRange {
            index: i,
            len: logits.len(),
        })?;
        if unknown_index >= l.len() {
            return Err(FoodError::IndexOutOfRange {
                index: unknown_index,
                len: l.len(),
            });
        }
        loss += inv * (log_sum_exp(l)? - l[unknown_index]);
        let p = softmax(l)?;
        for (c, pc) in p.iter().enumerate() {
            grad[i][c] += inv * (pc - if c == unknown_index { 1.0 } else { 0.0 });
        }
    }
    Ok(FullLogitLossGrad { loss, grad })
}
