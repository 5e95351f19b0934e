//! Quick runtime checks of the numerical core against brute-force
//! references, for `food selfcheck`.

use crate::cwsc::{
    ce_loss_grad, forward_logits, mc_expected_objective, ridge_closed_form, ClassifierWeights, RidgeEquivalenceCase,
};
use crate::error::Result;
use crate::metrics::f_beta;
use crate::numerics::{finite_diff_grad, log_sum_exp, Mat64, Rng};
use crate::udl::{unknown_loss_grad_full, unknown_softmax_loss_grad, PseudoUnknownSelection};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

fn check_f_beta() -> Check {
    let a = f_beta(3.59, 45.84, 10.0);
    let b = f_beta(11.53, 3.57, 10.0);
    Check {
        name: "f_beta",
        passed: (a - 41.06).abs() <= 0.01 && (b - 3.59).abs() <= 0.01,
        detail: format!("{a:.4} {b:.4}"),
    }
}

fn check_ce_gradient(rng: &mut Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (d, c) = (5, 5);
        let w = ClassifierWeights::new(Mat64::from_fn(d, c, |_, _| rng.normal()), 20.0)?;
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let label = rng.below(c);
        let g = ce_loss_grad(&x, &w, None, label)?;
        let loss_at = |xv: &[f64]| {
            let l = forward_logits(xv, &w, None).expect("finite");
            log_sum_exp(&l).expect("non-empty") - l[label]
        };
        worst = worst.max(rel_err(&g.grad_x, &finite_diff_grad(loss_at, &x, 1e-6)));
    }
    Ok(Check {
        name: "ce_gradient",
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.2e}"),
    })
}

fn check_decoupling(rng: &mut Rng) -> Result<Check> {
    let k = 5;
    let unknown = 3;
    let logits: Vec<Vec<f64>> = (0..6).map(|_| (0..k).map(|_| 5.0 * rng.normal()).collect()).collect();
    let selection = PseudoUnknownSelection {
        pos_fg: vec![0, 1],
        pos_bg: vec![4],
        energies: vec![0.0; 6],
    };
    let sig = unknown_loss_grad_full(&selection, &logits, unknown, 0.09, 0.09)?;
    let soft = unknown_softmax_loss_grad(&selection, &logits, unknown)?;
    let sig_zero = sig
        .grad
        .iter()
        .all(|g| g.iter().enumerate().all(|(c, v)| c == unknown || *v == 0.0));
    let soft_nonzero = soft.grad[0].iter().enumerate().any(|(c, v)| c != unknown && *v != 0.0);
    Ok(Check {
        name: "decoupling",
        passed: sig_zero && soft_nonzero,
        detail: format!("sigmoid known grads zero: {sig_zero}, softmax known grads nonzero: {soft_nonzero}"),
    })
}

fn check_ridge(rng: &mut Rng) -> Result<Check> {
    let (n, d) = (6, 4);
    let x = Mat64::from_fn(n, d, |_, _| rng.normal());
    let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let case = RidgeEquivalenceCase::new(y, x, &w, 2.0, 0.6)?;
    let exact = ridge_closed_form(&case);
    let mc = mc_expected_objective(&case, 100_000, rng);
    let rel = (mc - exact).abs() / exact;
    Ok(Check {
        name: "ridge_equivalence",
        passed: rel <= 0.01,
        detail: format!("closed form {exact:.5}, monte carlo {mc:.5}"),
    })
}

pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    Ok(vec![
        check_f_beta(),
        check_ce_gradient(&mut rng)?,
        check_decoupling(&mut rng)?,
        check_ridge(&mut rng)?,
    ])
}
