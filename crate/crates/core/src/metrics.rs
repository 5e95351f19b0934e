//! Open-set detection evaluation.
//!
//! Category indices in detection and ground-truth records are known class
//! slots `0..K`; [`UNKNOWN_CATEGORY`] marks the merged unknown class.
//!
//! Wilderness impact uses the convention
//! `WI = (P_closed / P_open - 1) * 100`, where both precisions are taken
//! over known-labeled detections at the score where known recall first
//! reaches `recall_level` (0.8 by default). `P_open` counts every
//! detection; `P_closed` drops the images that contain an unknown object.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FoodError, Result};

pub type BBox = [f64; 4];

pub const UNKNOWN_CATEGORY: i64 = -1;

pub fn valid_box(b: &BBox) -> bool {
    b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: u64,
    pub category: i64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub category: i64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !valid_box(bx) {
            return Err(FoodError::DegenerateBox(bx[0], bx[1], bx[2], bx[3]));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: &BBox| (x[2] - x[0]) * (x[3] - x[1]);
    Ok(inter / (area(a) + area(b) - inter))
}

fn cmp_box(a: &BBox, b: &BBox) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Descending score; remaining ties broken on content so the order never
/// depends on input position.
fn cmp_det(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.category.cmp(&b.category))
        .then(cmp_box(&a.bbox, &b.bbox))
}

fn cmp_gt(a: &GroundTruthBox, b: &GroundTruthBox) -> Ordering {
    a.image_id
        .cmp(&b.image_id)
        .then(a.category.cmp(&b.category))
        .then(cmp_box(&a.bbox, &b.bbox))
}

fn canonical_order<T>(items: &[T], cmp: impl Fn(&T, &T) -> Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&i, &j| cmp(&items[i], &items[j]).then(i.cmp(&j)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per input detection.
    pub det_tp: Vec<bool>,
    /// Per input ground truth.
    pub gt_matched: Vec<bool>,
}

/// Greedy one-to-one matching. Detections are visited by descending score;
/// each takes the unmatched same-image, same-category ground truth with the
/// highest IoU, provided it is at least `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thr: f64) -> Result<MatchResult> {
    let gt_rank = {
        let order = canonical_order(gts, cmp_gt);
        let mut rank = vec![0usize; gts.len()];
        for (r, &g) in order.iter().enumerate() {
            rank[g] = r;
        }
        rank
    };
    let mut det_tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in canonical_order(dets, cmp_det) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.image_id != det.image_id || gt.category != det.category {
                continue;
            }
            let o = iou(&det.bbox, &gt.bbox)?;
            if o < iou_thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((bg, bo)) => o > bo || (o == bo && gt_rank[g] < gt_rank[bg]),
            };
            if better {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            det_tp[d] = true;
        }
    }
    Ok(MatchResult { det_tp, gt_matched })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    /// Percent.
    pub ap: f64,
    /// False when the category has no ground truth; `ap` is then 0.
    pub has_ground_truth: bool,
}

/// All-point interpolated average precision for one category, in percent.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthBox], category: i64, iou_thr: f64) -> Result<ApResult> {
    let dets: Vec<Detection> = dets.iter().filter(|d| d.category == category).cloned().collect();
    let gts: Vec<GroundTruthBox> = gts.iter().filter(|g| g.category == category).cloned().collect();
    if gts.is_empty() {
        return Ok(ApResult {
            ap: 0.0,
            has_ground_truth: false,
        });
    }
    let matched = match_detections(&dets, &gts, iou_thr)?;
    let order = canonical_order(&dets, cmp_det);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &d) in order.iter().enumerate() {
        if matched.det_tp[d] {
            tp += 1;
        }
        recall.push(tp as f64 / gts.len() as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ApResult {
        ap: 100.0 * ap,
        has_ground_truth: true,
    })
}

/// Recall-weighted F-score on percent inputs; 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * precision * recall / denom
}

/// Precision and recall, in percent, of unknown-labeled detections scoring
/// at least `score_thr`.
pub fn unknown_pr(dets: &[Detection], gts: &[GroundTruthBox], score_thr: f64, iou_thr: f64) -> Result<(f64, f64)> {
    let dets: Vec<Detection> = dets
        .iter()
        .filter(|d| d.category == UNKNOWN_CATEGORY && d.score >= score_thr)
        .cloned()
        .collect();
    let gts: Vec<GroundTruthBox> = gts.iter().filter(|g| g.category == UNKNOWN_CATEGORY).cloned().collect();
    let m = match_detections(&dets, &gts, iou_thr)?;
    let tp = m.det_tp.iter().filter(|t| **t).count() as f64;
    let p = if dets.is_empty() {
        0.0
    } else {
        100.0 * tp / dets.len() as f64
    };
    let r = if gts.is_empty() {
        0.0
    } else {
        100.0 * tp / gts.len() as f64
    };
    Ok((p, r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WildernessImpact {
    /// `(P_closed / P_open - 1) * 100`.
    pub wi: f64,
    /// False when known recall never reaches the requested level; `wi` is
    /// then measured at the maximum-recall point.
    pub recall_reached: bool,
}

pub fn wilderness_impact(
    dets: &[Detection],
    known_gts: &[GroundTruthBox],
    unknown_gts: &[GroundTruthBox],
    recall_level: f64,
    iou_thr: f64,
) -> Result<WildernessImpact> {
    let known: Vec<Detection> = dets.iter().filter(|d| d.category >= 0).cloned().collect();
    let known_gts: Vec<GroundTruthBox> = known_gts.iter().filter(|g| g.category >= 0).cloned().collect();
    if known.is_empty() || known_gts.is_empty() {
        return Ok(WildernessImpact {
            wi: 0.0,
            recall_reached: false,
        });
    }
    let wild: std::collections::BTreeSet<u64> = unknown_gts.iter().map(|g| g.image_id).collect();
    let matched = match_detections(&known, &known_gts, iou_thr)?;
    let order = canonical_order(&known, cmp_det);

    let mut tp = 0usize;
    let mut cut: Option<usize> = None;
    let mut best = (0usize, 0usize);
    for (rank, &d) in order.iter().enumerate() {
        if matched.det_tp[d] {
            tp += 1;
            if tp > best.0 {
                best = (tp, rank);
            }
        }
        if tp as f64 / known_gts.len() as f64 >= recall_level {
            cut = Some(rank);
            break;
        }
    }
    let recall_reached = cut.is_some();
    let last = cut.unwrap_or(best.1);

    let (mut open_tp, mut open_n, mut closed_tp, mut closed_n) = (0usize, 0usize, 0usize, 0usize);
    for &d in &order[..=last] {
        let tp = matched.det_tp[d] as usize;
        open_tp += tp;
        open_n += 1;
        if !wild.contains(&known[d].image_id) {
            closed_tp += tp;
            closed_n += 1;
        }
    }
    let p_open = open_tp as f64 / open_n as f64;
    let p_closed = if closed_n == 0 {
        0.0
    } else {
        closed_tp as f64 / closed_n as f64
    };
    let wi = if p_open > 0.0 {
        100.0 * (p_closed / p_open - 1.0)
    } else {
        0.0
    };
    Ok(WildernessImpact { wi, recall_reached })
}

/// Number of unknown objects claimed by a known-labeled detection scoring at
/// least `score_thr`.
pub fn aose(dets: &[Detection], unknown_gts: &[GroundTruthBox], iou_thr: f64, score_thr: f64) -> Result<u64> {
    let claimed: Vec<Detection> = dets
        .iter()
        .filter(|d| d.category >= 0 && d.score >= score_thr)
        .map(|d| Detection {
            category: UNKNOWN_CATEGORY,
            ..d.clone()
        })
        .collect();
    let gts: Vec<GroundTruthBox> = unknown_gts
        .iter()
        .map(|g| GroundTruthBox {
            category: UNKNOWN_CATEGORY,
            ..g.clone()
        })
        .collect();
    let m = match_detections(&claimed, &gts, iou_thr)?;
    Ok(m.gt_matched.iter().filter(|x| **x).count() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub num_base: usize,
    pub num_novel: usize,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub beta: f64,
    pub wi_recall_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_base: 6,
            num_novel: 3,
            iou_threshold: 0.5,
            score_threshold: 0.1,
            beta: 10.0,
            wi_recall_level: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_k: f64,
    pub map_b: f64,
    pub map_n: f64,
    pub ap_u: f64,
    pub p_u: f64,
    pub r_u: f64,
    pub f_u: f64,
    pub wi: f64,
    pub aose: u64,
    /// Indexed by known category.
    pub per_class_ap: Vec<f64>,
    /// Known categories without ground truth; excluded from the means.
    pub classes_without_gt: Vec<usize>,
    pub wi_recall_reached: bool,
    pub score_threshold: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruthBox], config: &EvalConfig) -> Result<EvalReport> {
    let k = config.num_base + config.num_novel;
    let thr = config.iou_threshold;
    let mut per_class_ap = Vec::with_capacity(k);
    let mut classes_without_gt = Vec::new();
    let (mut all, mut base, mut novel) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..k {
        let r = average_precision(dets, gts, c as i64, thr)?;
        per_class_ap.push(r.ap);
        if !r.has_ground_truth {
            classes_without_gt.push(c);
            continue;
        }
        all.push(r.ap);
        if c < config.num_base {
            base.push(r.ap);
        } else {
            novel.push(r.ap);
        }
    }
    let ap_u = average_precision(dets, gts, UNKNOWN_CATEGORY, thr)?.ap;
    let (p_u, r_u) = unknown_pr(dets, gts, config.score_threshold, thr)?;
    let (known_gts, unknown_gts): (Vec<GroundTruthBox>, Vec<GroundTruthBox>) =
        gts.iter().cloned().partition(|g| g.category >= 0);
    let wi = wilderness_impact(dets, &known_gts, &unknown_gts, config.wi_recall_level, thr)?;
    Ok(EvalReport {
        map_k: mean(&all),
        map_b: mean(&base),
        map_n: mean(&novel),
        ap_u,
        p_u,
        r_u,
        f_u: f_beta(p_u, r_u, config.beta),
        wi: wi.wi,
        aose: aose(dets, &unknown_gts, thr, config.score_threshold)?,
        per_class_ap,
        classes_without_gt,
        wi_recall_reached: wi.recall_reached,
        score_threshold: config.score_threshold,
    })
}

fn parse_records<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<Vec<T>> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| FoodError::Format(format!("{what}: not a JSON array: {e}")))?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v).map_err(|e| FoodError::Format(format!("{what} record {i}: {e}"))))
        .collect()
}

fn check_category(category: i64, i: usize, what: &str) -> Result<()> {
    if category < UNKNOWN_CATEGORY {
        return Err(FoodError::Format(format!(
            "{what} record {i}: invalid category {category}"
        )));
    }
    Ok(())
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = parse_records(text, "detections")?;
    for (i, d) in dets.iter().enumerate() {
        check_category(d.category, i, "detections")?;
        if !valid_box(&d.bbox) {
            return Err(FoodError::Format(format!("detections record {i}: invalid box")));
        }
        if !d.score.is_finite() {
            return Err(FoodError::Format(format!("detections record {i}: non-finite score")));
        }
    }
    Ok(dets)
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthBox>> {
    let gts: Vec<GroundTruthBox> = parse_records(text, "ground truth")?;
    for (i, g) in gts.iter().enumerate() {
        check_category(g.category, i, "ground truth")?;
        if !valid_box(&g.bbox) {
            return Err(FoodError::Format(format!("ground truth record {i}: invalid box")));
        }
    }
    Ok(gts)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&fs::read_to_string(path)?)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthBox>> {
    parse_ground_truth(&fs::read_to_string(path)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| FoodError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_detections(dets: &[Detection], path: &Path) -> Result<()> {
    write_json(&dets, path)
}

pub fn write_ground_truth(gts: &[GroundTruthBox], path: &Path) -> Result<()> {
    write_json(&gts, path)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(report, path)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| FoodError::Format(format!("report: {e}")))
}

pub fn evaluate_files(dets: &Path, gts: &Path, config: &EvalConfig) -> Result<EvalReport> {
    evaluate(&read_detections(dets)?, &read_ground_truth(gts)?, config)
}
