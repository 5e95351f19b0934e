//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report reads top to
//! bottom. Criteria listed in `KNOWN_FAILURES` still print FAIL when they
//! fail but do not turn the exit status red; the README explains each.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use food_core::cwsc::{
    ce_loss_grad, forward_logits, mc_expected_objective, ridge_closed_form, sample_mask, ClassifierWeights,
    RidgeEquivalenceCase, SparsityMask,
};
use food_core::experiment::{
    base_stage, evaluate_checkpoint, finetune_stage, run_experiment, run_pipeline, Artifacts, ExperimentConfig,
};
use food_core::head::{
    total_loss_grad, total_loss_grad_fixed_selection, HeadParams, Hyper, ProposalBatch, UnknownLoss,
};
use food_core::metrics::{
    evaluate, read_detections, read_ground_truth, read_report, Detection, EvalConfig, EvalReport,
};
use food_core::numerics::{Mat64, Rng};
use food_core::synthbench::generate;
use food_core::train::{init_params, weight_average, Checkpoint, FinetuneVariant, Stage, TrainConfig, Trajectory};
use food_core::udl::{
    select_pseudo_unknowns, select_pseudo_unknowns_by, top_k, unknown_loss_grad, unknown_loss_grad_full,
    unknown_softmax_loss_grad, PseudoUnknownSelection, SamplingRule,
};

const KNOWN_FAILURES: &[usize] = &[8];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normals(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn random_subset(rng: &mut Rng, pool: &[usize], max: usize) -> Vec<usize> {
    let mut left = pool.to_vec();
    let k = rng.below(max.min(pool.len()) + 1);
    (0..k).map(|_| left.swap_remove(rng.below(left.len()))).collect()
}

fn c1_f_beta() -> Outcome {
    let a = food_core::metrics::f_beta(3.59, 45.84, 10.0);
    let b = food_core::metrics::f_beta(11.53, 3.57, 10.0);
    ensure(
        (a - 41.06).abs() <= 0.01 && (b - 3.59).abs() <= 0.01,
        format!("f_beta(3.59, 45.84) = {a:.4}, f_beta(11.53, 3.57) = {b:.4}"),
    )
}

fn c2_gradients() -> Outcome {
    const N: usize = 100;
    const H: f64 = 1e-5;
    let (d0, d, k) = (6usize, 5usize, 3usize);
    let classes = k + 2;
    let unknown = k;
    let mut rng = Rng::new(2);
    let mut worst = [0.0f64; 4];

    // cross-entropy through both normalizations and the mask
    for i in 0..N {
        let alpha = rng.uniform_range(1.0, 30.0);
        let w_flat = normals(&mut rng, d * classes, 1.0);
        let w = ClassifierWeights::new(Mat64::from_vec(d, classes, w_flat.clone()).unwrap(), alpha).unwrap();
        let x = normals(&mut rng, d, 1.0);
        let mask = match i % 3 {
            0 => None,
            1 => Some(sample_mask(0.6, d, classes, &mut rng).unwrap()),
            _ => Some(SparsityMask::bernoulli(0.4, d, classes, &mut rng).unwrap()),
        };
        let m = mask.as_ref().map(|m| m.matrix().as_slice().to_vec());
        let label = rng.below(classes);
        let g = ce_loss_grad(&x, &w, mask.as_ref(), label).unwrap();
        let fx = common::central_diff(
            |xv| common::ce(&common::logits(xv, &w_flat, classes, alpha, m.as_deref()), label),
            &x,
            H,
        );
        let fw = common::central_diff(
            |wv| common::ce(&common::logits(&x, wv, classes, alpha, m.as_deref()), label),
            &w_flat,
            H,
        );
        worst[0] = worst[0]
            .max(common::rel_err(&g.grad_x, &fx))
            .max(common::rel_err(g.grad_w.as_slice(), &fw));
    }

    // sigmoid unknown loss on l_U
    for _ in 0..N {
        let n = 12;
        let lu = normals(&mut rng, n, 5.0);
        let all: Vec<usize> = (0..n).collect();
        let (fg, bg) = all.split_at(rng.below(n - 1) + 1);
        let mut sel = PseudoUnknownSelection {
            pos_fg: random_subset(&mut rng, fg, 4),
            pos_bg: random_subset(&mut rng, bg, 6),
            energies: Vec::new(),
        };
        if sel.is_empty() {
            sel.pos_fg.push(fg[0]);
        }
        let (d1, d2) = (rng.uniform_range(0.05, 2.0), rng.uniform_range(0.05, 2.0));
        let g = unknown_loss_grad(&sel, &lu, d1, d2).unwrap();
        let f = common::central_diff(
            |v| common::sigmoid_unknown_loss(&sel.pos_fg, &sel.pos_bg, v, d1, d2),
            &lu,
            H,
        );
        worst[1] = worst[1].max(common::rel_err(&g.grad, &f));
    }

    // softmax ablation over full logit vectors
    for _ in 0..N {
        let n = 10;
        let logits: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, classes, 5.0)).collect();
        let all: Vec<usize> = (0..n).collect();
        let mut sel = PseudoUnknownSelection {
            pos_fg: random_subset(&mut rng, &all[..5], 3),
            pos_bg: random_subset(&mut rng, &all[5..], 3),
            energies: Vec::new(),
        };
        if sel.is_empty() {
            sel.pos_bg.push(7);
        }
        let selected: Vec<usize> = sel.indices().collect();
        let g = unknown_softmax_loss_grad(&sel, &logits, unknown).unwrap();
        let flat: Vec<f64> = logits.concat();
        let f = common::central_diff(
            |v| {
                let rows: Vec<Vec<f64>> = v.chunks(classes).map(|c| c.to_vec()).collect();
                common::softmax_unknown_loss(&selected, &rows, unknown)
            },
            &flat,
            H,
        );
        worst[2] = worst[2].max(common::rel_err(&g.grad.concat(), &f));
    }

    // full objective through trunk, classifier and the mined selection
    let shape = common::HeadShape {
        d0,
        d,
        classes,
        alpha: 0.0,
    };
    let mut done = 0;
    while done < N {
        let n = 10;
        let alpha = rng.uniform_range(2.0, 20.0);
        let shape = common::HeadShape { alpha, ..shape };
        let hyper = Hyper {
            lambda: rng.uniform_range(0.5, 2.0),
            delta1: rng.uniform_range(0.05, 1.0),
            delta2: rng.uniform_range(0.05, 1.0),
            n_pos: 2,
            n_neg: 3,
            unknown_loss: if done % 2 == 0 {
                UnknownLoss::Sigmoid
            } else {
                UnknownLoss::Softmax
            },
            ..Hyper::default()
        };
        let trunk_w = normals(&mut rng, d0 * d, 0.7);
        let trunk_b = normals(&mut rng, d, 0.5);
        let cls = normals(&mut rng, d * classes, 1.0);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, d0, 1.0)).collect();
        let fg: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let labels: Vec<usize> = fg.iter().map(|f| if *f { rng.below(k) } else { k + 1 }).collect();
        let flat: Vec<f64> = [trunk_w.clone(), trunk_b.clone(), cls.clone()].concat();
        let on_kink = xs.iter().any(|x| {
            common::head_preacts(&flat, shape, x).iter().all(|p| *p <= 0.0)
                || common::head_preacts(&flat, shape, x).iter().any(|p| p.abs() < 1e-3)
        });
        if on_kink {
            continue;
        }
        let params = HeadParams::new(
            Mat64::from_vec(d0, d, trunk_w).unwrap(),
            trunk_b,
            ClassifierWeights::new(Mat64::from_vec(d, classes, cls).unwrap(), alpha).unwrap(),
            hyper.clone(),
        )
        .unwrap();
        let batch = ProposalBatch::new(Mat64::from_rows(&xs).unwrap(), labels.clone(), fg).unwrap();
        let mask = (done % 3 == 1).then(|| sample_mask(0.6, d, classes, &mut rng).unwrap());
        let m = mask.as_ref().map(|m| m.matrix().as_slice().to_vec());
        let out = total_loss_grad(&batch, &params, mask.as_ref()).unwrap();
        let sel = out.diagnostics.selection.clone();
        let fixed = total_loss_grad_fixed_selection(&batch, &params, mask.as_ref(), &sel).unwrap();
        if fixed.grads.flatten() != out.grads.flatten() {
            return Err("fixed-selection gradient differs from the mined one".into());
        }
        let term = common::UnknownTerm {
            sigmoid: hyper.unknown_loss == UnknownLoss::Sigmoid,
            lambda: hyper.lambda,
            d1: hyper.delta1,
            d2: hyper.delta2,
            pos_fg: &sel.pos_fg,
            pos_bg: &sel.pos_bg,
        };
        let oracle_loss = common::head_loss(&flat, shape, &xs, &labels, m.as_deref(), &term);
        if (oracle_loss - out.loss).abs() > 1e-10 * oracle_loss.abs().max(1.0) {
            return Err(format!("total loss {} vs oracle {oracle_loss}", out.loss));
        }
        let f = common::central_diff(
            |v| common::head_loss(v, shape, &xs, &labels, m.as_deref(), &term),
            &flat,
            H,
        );
        worst[3] = worst[3].max(common::rel_err(&out.grads.flatten(), &f));
        done += 1;
    }

    ensure(
        worst.iter().all(|w| *w <= 1e-5),
        format!(
            "{N} instances each; max rel err ce {:.1e}, sigmoid {:.1e}, softmax {:.1e}, total {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn c3_decoupling() -> Outcome {
    let mut rng = Rng::new(3);
    let (n, classes, unknown) = (12usize, 5usize, 3usize);
    let mut softmax_hits = 0;
    let instances = 100;
    for _ in 0..instances {
        let logits: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, classes, 4.0)).collect();
        let fg: Vec<usize> = (0..n / 2).collect();
        let bg: Vec<usize> = (n / 2..n).collect();
        let sel = select_pseudo_unknowns(&logits, &fg, &bg, 2, 4, unknown).unwrap();
        let sig = unknown_loss_grad_full(&sel, &logits, unknown, 0.09, 0.09).unwrap();
        let leaks = sig
            .grad
            .iter()
            .any(|row| row.iter().enumerate().any(|(c, g)| c != unknown && *g != 0.0));
        if leaks {
            return Err("sigmoid loss has a nonzero known-class gradient".into());
        }
        if sel.indices().any(|i| sig.grad[i][unknown] == 0.0) {
            return Err("sigmoid loss gives no gradient to a selected l_U".into());
        }
        let soft = unknown_softmax_loss_grad(&sel, &logits, unknown).unwrap();
        let every_selected_leaks = sel
            .indices()
            .all(|i| soft.grad[i].iter().enumerate().any(|(c, g)| c != unknown && *g != 0.0));
        softmax_hits += every_selected_leaks as usize;
    }

    // through the whole head: the unknown term leaves known classifier columns untouched
    let (d0, d, k) = (6, 5, 3);
    let params = HeadParams::new(
        Mat64::from_fn(d0, d, |_, _| rng.normal()),
        normals(&mut rng, d, 0.5),
        ClassifierWeights::new(Mat64::from_fn(d, k + 2, |_, _| rng.normal()), 20.0).unwrap(),
        Hyper::default(),
    )
    .unwrap();
    let batch = ProposalBatch::new(
        Mat64::from_fn(16, d0, |_, _| rng.normal()),
        (0..16).map(|i| if i < 8 { i % k } else { k + 1 }).collect(),
        (0..16).map(|i| i < 8).collect(),
    )
    .unwrap();
    let with = total_loss_grad(&batch, &params, None).unwrap();
    let mut off = params.clone();
    off.hyper.lambda = 0.0;
    let without = total_loss_grad_fixed_selection(&batch, &off, None, &with.diagnostics.selection).unwrap();
    let same_known =
        (0..d).all(|j| (0..k + 2).all(|c| c == k || with.grads.classifier[(j, c)] == without.grads.classifier[(j, c)]));
    ensure(
        softmax_hits == instances && same_known,
        format!(
            "sigmoid known-class grads exactly 0 on {instances}/{instances}; softmax nonzero on {softmax_hits}/{instances}; known columns unchanged by UDL: {same_known}"
        ),
    )
}

fn c4_ridge() -> Outcome {
    let mut rng = Rng::new(4);
    let mut cases = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let d = 2 + rng.below(7);
        let n = 3 + rng.below(8);
        let p = [0.3, 0.6, 0.9][i % 3];
        let alpha = rng.uniform_range(0.5, 4.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, d, 1.0)).collect();
        let y = normals(&mut rng, n, 1.0);
        let w = normals(&mut rng, d, 1.0);
        let case = RidgeEquivalenceCase::new(y.clone(), Mat64::from_rows(&rows).unwrap(), &w, alpha, p).unwrap();
        let exact = ridge_closed_form(&case);
        let oracle = common::ridge(&y, &rows, &w, alpha, p);
        if (exact - oracle).abs() > 1e-12 * oracle {
            return Err(format!("closed form {exact} disagrees with test oracle {oracle}"));
        }
        let mc = mc_expected_objective(&case, 100_000, &mut rng);
        worst = worst.max((mc - exact).abs() / exact);
        cases.push((case, exact));
    }
    // per-case mean squared relative error over repeated runs at T and 2T,
    // combined as the geometric mean of the per-case ratios
    let (t1, reps) = (25_000, 16);
    let mut log_ratio = 0.0;
    let (mut e1, mut e2) = (0.0, 0.0);
    for (case, exact) in &cases {
        let mut mse = |trials: usize| {
            (0..reps)
                .map(|_| ((mc_expected_objective(case, trials, &mut rng) - exact) / exact).powi(2))
                .sum::<f64>()
                / reps as f64
        };
        let (a, b) = (mse(t1), mse(2 * t1));
        log_ratio += (b / a).ln() / cases.len() as f64;
        e1 += a / cases.len() as f64;
        e2 += b / cases.len() as f64;
    }
    let ratio = log_ratio.exp();
    ensure(
        worst <= 0.01 && ratio < 1.0,
        format!(
            "20 cases, 1e5 masks: max rel err {:.3}%; doubling {t1} -> {} trials: RMS {:.4}% -> {:.4}%, MSE ratio {ratio:.2}",
            100.0 * worst,
            2 * t1,
            100.0 * e1.sqrt(),
            100.0 * e2.sqrt()
        ),
    )
}

fn c5_logit_bounds() -> Outcome {
    let mut rng = Rng::new(5);
    let mut max_ratio = 0.0f64;
    for i in 0..10_000 {
        let d = 1 + rng.below(16);
        let classes = 3 + rng.below(8);
        let alpha = rng.uniform_range(0.1, 50.0);
        let w = ClassifierWeights::new(Mat64::from_fn(d, classes, |_, _| rng.normal()), alpha).unwrap();
        let scale = rng.uniform_range(0.01, 100.0);
        let x = normals(&mut rng, d, scale);
        let mask = match i % 3 {
            0 => None,
            1 => Some(sample_mask(rng.uniform_range(0.0, 0.95), d, classes, &mut rng).unwrap()),
            _ => Some(SparsityMask::bernoulli(rng.uniform_range(0.0, 0.95), d, classes, &mut rng).unwrap()),
        };
        for l in forward_logits(&x, &w, mask.as_ref()).unwrap() {
            max_ratio = max_ratio.max(l.abs() / alpha);
        }
    }
    if max_ratio > 1.0 + 1e-12 {
        return Err(format!("|logit|/alpha reached {max_ratio}"));
    }

    // mask mean over iid masks with keep probability q = 1 - p_hat
    let trials = 100_000;
    let mut worst_band = f64::NEG_INFINITY;
    let mut worst_mean = 0.0f64;
    let mut checked = 0;
    for _ in 0..8 {
        let (d, classes) = (6, 5);
        let alpha = rng.uniform_range(1.0, 30.0);
        let p_hat = rng.uniform_range(0.1, 0.9);
        let q = 1.0 - p_hat;
        let w = ClassifierWeights::new(Mat64::from_fn(d, classes, |_, _| rng.normal()), alpha).unwrap();
        let x = normals(&mut rng, d, 1.0);
        let dense = forward_logits(&x, &w, None).unwrap();
        let mut sum = vec![0.0; classes];
        let mut sq = vec![0.0; classes];
        for _ in 0..trials {
            let m = SparsityMask::bernoulli(p_hat, d, classes, &mut rng).unwrap();
            for (c, l) in forward_logits(&x, &w, Some(&m)).unwrap().iter().enumerate() {
                sum[c] += l;
                sq[c] += l * l;
            }
        }
        for c in 0..classes {
            let mean = sum[c] / trials as f64;
            let var = (sq[c] / trials as f64 - mean * mean).max(0.0);
            let se = (var / trials as f64).sqrt();
            // distance outside the band, in units of the allowed 3 SE slack
            worst_band = worst_band.max((mean.abs() - q * alpha) / (3.0 * se));
            worst_mean = worst_mean.max((mean - q * dense[c]).abs() / se);
            checked += 1;
        }
    }
    ensure(
        worst_band <= 1.0,
        format!(
            "1e4 triples: max |l|/alpha = {max_ratio:.6}; {checked} mask means inside [-q a, q a] + 3 SE (max excess {worst_band:.2} x 3 SE), |mean - q l_dense| <= {worst_mean:.2} SE"
        ),
    )
}

fn oracle_score(rule: SamplingRule, l: &[f64], unknown: usize) -> f64 {
    match rule {
        SamplingRule::MaxCondEnergy => common::cond_energy(l, unknown),
        SamplingRule::MinUnknownLogit => -l[unknown],
        SamplingRule::MinMaxProb => -common::softmax(l).into_iter().fold(0.0, f64::max),
        SamplingRule::MaxEntropy => -common::softmax(l)
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>(),
    }
}

fn c6_top_k() -> Outcome {
    let mut rng = Rng::new(6);
    let (classes, unknown) = (5usize, 3usize);
    let mut compared = 0usize;
    for _ in 0..100 {
        let n = 1 + rng.below(1000);
        // a few shared rows give exact score ties
        let shared: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut rng, classes, 3.0)).collect();
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                if rng.bernoulli(0.3) {
                    shared[rng.below(3)].clone()
                } else {
                    normals(&mut rng, classes, 3.0)
                }
            })
            .collect();
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        for i in 0..n {
            match rng.below(3) {
                0 => fg.push(i),
                1 => bg.push(i),
                _ => {}
            }
        }
        let n_pos = rng.below(n + 2);
        let n_neg = rng.below(n + 2);
        for rule in SamplingRule::ALL {
            let sel = select_pseudo_unknowns_by(rule, &logits, &fg, &bg, n_pos, n_neg, unknown).unwrap();
            let scores: Vec<f64> = logits.iter().map(|l| oracle_score(rule, l, unknown)).collect();
            for (a, b) in sel.energies.iter().zip(&scores) {
                if (a - b).abs() > 1e-12 * b.abs().max(1.0) {
                    return Err(format!("{rule} score {a} vs oracle {b}"));
                }
            }
            if sel.pos_fg != common::brute_top_k(&scores, &fg, n_pos)
                || sel.pos_bg != common::brute_top_k(&scores, &bg, n_neg)
            {
                return Err(format!("{rule} selection differs from brute force on a pool of {n}"));
            }
            compared += 1;
        }
        let default = select_pseudo_unknowns(&logits, &fg, &bg, n_pos, n_neg, unknown).unwrap();
        let by_energy =
            select_pseudo_unknowns_by(SamplingRule::MaxCondEnergy, &logits, &fg, &bg, n_pos, n_neg, unknown).unwrap();
        if default != by_energy {
            return Err("select_pseudo_unknowns is not the max_cond_energy rule".into());
        }
        // integer scores: heavy ties
        let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
        let pool: Vec<usize> = (0..n).collect();
        let k = rng.below(n + 1);
        if top_k(&scores, &pool, k) != common::brute_top_k(&scores, &pool, k) {
            return Err("top_k differs from brute force on tied scores".into());
        }
    }
    ensure(
        true,
        format!("100 pools up to 1000 proposals, {compared} rule selections match brute force"),
    )
}

fn default_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.sync();
    cfg
}

fn baseline(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.train.hyper.use_udl = false;
    cfg.train.use_cwsc = false;
    cfg.exclude_unknown_baseline = true;
    cfg.sync();
    cfg
}

fn mean_of(reports: &[EvalReport], f: impl Fn(&EvalReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

fn c7_end_to_end() -> Outcome {
    let mut base_reports = Vec::new();
    let mut food_reports = Vec::new();
    for seed in SEEDS {
        let cfg = default_config(seed);
        base_reports.push(run_pipeline(&baseline(cfg.clone())).map_err(|e| e.to_string())?.report);
        food_reports.push(run_pipeline(&cfg).map_err(|e| e.to_string())?.report);
    }
    let base_ru_zero = base_reports.iter().all(|r| r.r_u == 0.0);
    let ru = mean_of(&food_reports, |r| r.r_u);
    let apu = mean_of(&food_reports, |r| r.ap_u);
    let drop = mean_of(&base_reports, |r| r.map_k) - mean_of(&food_reports, |r| r.map_k);
    ensure(
        base_ru_zero && ru >= 30.0 && apu > 0.0 && drop <= 5.0,
        format!(
            "baseline R_U = {:.2} (mAP_K {:.2}); FOOD R_U = {ru:.2}, AP_U = {apu:.2} (mAP_K {:.2}, drop {drop:.2})",
            mean_of(&base_reports, |r| r.r_u),
            mean_of(&base_reports, |r| r.map_k),
            mean_of(&food_reports, |r| r.map_k)
        ),
    )
}

fn c8_variants() -> Outcome {
    let variants = [FinetuneVariant::Lp, FinetuneVariant::Ft, FinetuneVariant::LpFtGdl];
    let mut map_b = [0.0f64; 3];
    let mut lp_frozen = true;
    for seed in SEEDS {
        let cfg = default_config(seed);
        let data = generate(&cfg.benchmark).map_err(|e| e.to_string())?;
        let base = base_stage(&cfg, &data).map_err(|e| e.to_string())?;
        for (slot, v) in variants.iter().enumerate() {
            let mut c = cfg.clone();
            c.train.variant = *v;
            c.sync();
            let (ck, _) = finetune_stage(&c, &data, &base).map_err(|e| e.to_string())?;
            if *v == FinetuneVariant::Lp {
                lp_frozen &= ck.params.trunk_w == base.params.trunk_w && ck.params.trunk_b == base.params.trunk_b;
            }
            map_b[slot] += evaluate_checkpoint(&c, &data, &ck).map_err(|e| e.to_string())?.1.map_b / SEEDS.len() as f64;
        }
    }
    let ft_lowest = map_b[1] < map_b[0] && map_b[1] < map_b[2];
    ensure(
        ft_lowest && lp_frozen,
        format!(
            "mAP_B lp {:.2}, ft {:.2}, lp-ft-gdl {:.2}; ft lowest: {ft_lowest}; lp trunk bit-identical: {lp_frozen}",
            map_b[0], map_b[1], map_b[2]
        ),
    )
}

fn c9_weight_average() -> Outcome {
    let mut rng = Rng::new(9);
    let cfg = TrainConfig {
        embed_dim: 7,
        ..TrainConfig::default()
    };
    let checkpoints: Vec<Checkpoint> = (0..6)
        .map(|i| Checkpoint {
            params: init_params(5, 4, &cfg, &mut rng).unwrap(),
            stage: Stage::Finetune,
            iteration: 10 * (i + 1),
            fingerprint: 0,
        })
        .collect();
    let traj = Trajectory {
        step: 10,
        checkpoints: checkpoints.clone(),
    };
    let wa = weight_average(&traj).map_err(|e| e.to_string())?;
    let flats: Vec<Vec<f64>> = checkpoints.iter().map(|c| c.params.flatten()).collect();
    let mut worst = 0.0f64;
    for (j, got) in wa.params.flatten().iter().enumerate() {
        let mean = flats.iter().map(|f| f[j]).sum::<f64>() / flats.len() as f64;
        worst = worst.max((got - mean).abs());
    }
    if worst > 1e-15 {
        return Err(format!("weight average off the elementwise mean by {worst:e}"));
    }

    let (mut final_b, mut wa_b, mut changed) = (0.0, 0.0, 0usize);
    for seed in SEEDS {
        let mut cfg = default_config(seed);
        cfg.use_wa = true;
        cfg.sync();
        let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
        let (_, last) = evaluate_checkpoint(&cfg, &out.dataset, &out.finetuned).map_err(|e| e.to_string())?;
        changed += (last != out.report) as usize;
        final_b += last.map_b / SEEDS.len() as f64;
        wa_b += out.report.map_b / SEEDS.len() as f64;
    }
    ensure(
        changed > 0 && wa_b >= final_b - 1.0,
        format!(
            "elementwise mean within {worst:.1e}; WA changed the report on {changed}/{} seeds; mAP_B final {final_b:.2}, WA {wa_b:.2}",
            SEEDS.len()
        ),
    )
}

fn golden_config() -> EvalConfig {
    EvalConfig {
        num_base: 2,
        num_novel: 2,
        ..EvalConfig::default()
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn c10_metrics() -> Outcome {
    // every ground truth detected exactly once, score 1
    let cfg = default_config(0);
    let data = generate(&cfg.benchmark).map_err(|e| e.to_string())?;
    let gts = data.test_ground_truth();
    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            image_id: g.image_id,
            category: g.category,
            bbox: g.bbox,
            score: 1.0,
        })
        .collect();
    let r = evaluate(&perfect, &gts, &cfg.eval).map_err(|e| e.to_string())?;
    if !(r.map_k == 100.0 && r.map_b == 100.0 && r.map_n == 100.0 && r.wi == 0.0 && r.aose == 0) {
        return Err(format!("perfect detections gave {r:?}"));
    }

    // golden scenario: 8 ground truths, 12 detections, values below are worked out by hand
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let dets = read_detections(&dir.join("golden_detections.json")).map_err(|e| e.to_string())?;
    let golden_gts = read_ground_truth(&dir.join("golden_ground_truth.json")).map_err(|e| e.to_string())?;
    let report = evaluate(&dets, &golden_gts, &golden_config()).map_err(|e| e.to_string())?;
    let hand = [
        (
            "AP class 0",
            report.per_class_ap[0],
            100.0 * (1.0 / 3.0 + 2.0 / 3.0 * 0.75),
        ),
        ("AP class 1", report.per_class_ap[1], 50.0),
        ("AP class 2", report.per_class_ap[2], 100.0),
        ("AP class 3", report.per_class_ap[3], 0.0),
        ("mAP_K", report.map_k, (250.0 / 3.0 + 50.0 + 100.0) / 3.0),
        ("mAP_B", report.map_b, (250.0 / 3.0 + 50.0) / 2.0),
        ("mAP_N", report.map_n, 100.0),
        ("AP_U", report.ap_u, 50.0),
        ("P_U", report.p_u, 50.0),
        ("R_U", report.r_u, 50.0),
        ("F_U", report.f_u, 50.0),
        ("WI", report.wi, 100.0 * ((3.0 / 4.0) / (5.0 / 7.0) - 1.0)),
    ];
    for (name, got, want) in hand {
        if !close(got, want) {
            return Err(format!("golden {name}: {got} vs hand value {want}"));
        }
    }
    if report.aose != 2 || report.classes_without_gt != vec![3] || !report.wi_recall_reached {
        return Err(format!("golden aose/classes/recall: {report:?}"));
    }
    let frozen = read_report(&dir.join("golden_report.json")).map_err(|e| e.to_string())?;
    if frozen != report {
        return Err("golden report differs from the frozen file".into());
    }

    // input order
    let mut rng = Rng::new(10);
    let mut noisy = Vec::new();
    for g in gts.iter() {
        if !rng.bernoulli(0.8) {
            continue;
        }
        noisy.push(Detection {
            image_id: g.image_id,
            category: if rng.bernoulli(0.2) {
                rng.below(9) as i64 - 1
            } else {
                g.category
            },
            bbox: [
                g.bbox[0] + rng.uniform_range(-3.0, 3.0),
                g.bbox[1],
                g.bbox[2],
                g.bbox[3] + 1.0,
            ],
            score: (rng.below(20) as f64) / 20.0 + 0.01,
        });
    }
    for (d, g, c) in [(&dets, &golden_gts, golden_config()), (&noisy, &gts, cfg.eval.clone())] {
        let want = evaluate(d, g, &c).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let (mut d2, mut g2) = (d.clone(), g.clone());
            shuffle(&mut d2, &mut rng);
            shuffle(&mut g2, &mut rng);
            if evaluate(&d2, &g2, &c).map_err(|e| e.to_string())? != want {
                return Err("evaluate depends on input order".into());
            }
        }
    }
    ensure(
        true,
        format!(
            "perfect: mAP 100, WI 0, AOSE 0; golden matches hand values and frozen report (mAP_K {:.4}, WI {:.4}, AOSE {}); 10 shuffles identical",
            report.map_k, report.wi, report.aose
        ),
    )
}

fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.below(i + 1));
    }
}

fn c11_determinism() -> Outcome {
    let mut cfg = default_config(7);
    cfg.use_wa = true;
    cfg.sync();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_experiment(&cfg, a.path()).map_err(|e| e.to_string())?;
    run_experiment(&cfg, b.path()).map_err(|e| e.to_string())?;
    let (fa, fb) = (Artifacts::new(a.path()), Artifacts::new(b.path()));
    let files = [
        (fa.config(), fb.config()),
        (fa.dataset(), fb.dataset()),
        (fa.base_checkpoint(), fb.base_checkpoint()),
        (fa.finetune_checkpoint(), fb.finetune_checkpoint()),
        (fa.wa_checkpoint(), fb.wa_checkpoint()),
        (fa.detections(), fb.detections()),
        (fa.ground_truth(), fb.ground_truth()),
        (fa.report_json(), fb.report_json()),
        (fa.report_txt(), fb.report_txt()),
    ];
    let mut bytes = 0;
    for (x, y) in &files {
        let (bx, by) = (
            std::fs::read(x).map_err(|e| e.to_string())?,
            std::fs::read(y).map_err(|e| e.to_string())?,
        );
        if bx != by {
            return Err(format!(
                "{} differs between runs",
                x.file_name().unwrap().to_string_lossy()
            ));
        }
        bytes += bx.len();
    }
    ensure(
        true,
        format!("{} artifacts, {bytes} bytes, identical across two runs", files.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("f_beta arithmetic", c1_f_beta),
        ("gradient fidelity", c2_gradients),
        ("decoupling", c3_decoupling),
        ("ridge equivalence", c4_ridge),
        ("logit bounds", c5_logit_bounds),
        ("top-k and rule oracles", c6_top_k),
        ("end-to-end R_U contrast", c7_end_to_end),
        ("fine-tuning variant order", c8_variants),
        ("weight averaging", c9_weight_average),
        ("metrics and golden files", c10_metrics),
        ("determinism", c11_determinism),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name:<26} {secs:6.2}s  {detail}"),
            Err(detail) => {
                let known = KNOWN_FAILURES.contains(&id);
                println!(
                    "FAIL {id:>2} {name:<26} {secs:6.2}s  {detail}{}",
                    if known { "  [known failure, see README]" } else { "" }
                );
                unexpected += (!known) as usize;
            }
        }
    }
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
