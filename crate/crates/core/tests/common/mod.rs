//! Reference implementations written independently of the library, used as
//! oracles by the integration tests.

#![allow(dead_code)]

/// Column `c` of a row-major `rows x cols` matrix.
pub fn col(m: &[f64], cols: usize, c: usize) -> Vec<f64> {
    m.iter().skip(c).step_by(cols).copied().collect()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let z = lse(v);
    v.iter().map(|x| (x - z).exp()).collect()
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `alpha * x/|x| . (r_c * w_c/|w_c|)` for every column `c` of the row-major
/// `d x classes` weight matrix. `mask` has the same layout, entries 0 or 1.
pub fn logits(x: &[f64], w: &[f64], classes: usize, alpha: f64, mask: Option<&[f64]>) -> Vec<f64> {
    let d = x.len();
    let xn = l2(x);
    (0..classes)
        .map(|c| {
            let wc = col(w, classes, c);
            let wn = l2(&wc);
            let mut s = 0.0;
            for j in 0..d {
                let r = mask.map_or(1.0, |m| m[j * classes + c]);
                s += (x[j] / xn) * r * (wc[j] / wn);
            }
            alpha * s
        })
        .collect()
}

pub fn ce(l: &[f64], label: usize) -> f64 {
    lse(l) - l[label]
}

/// Energy over every slot except `unknown`.
pub fn cond_energy(l: &[f64], unknown: usize) -> f64 {
    let rest: Vec<f64> = l
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != unknown)
        .map(|(_, v)| *v)
        .collect();
    -lse(&rest)
}

pub fn sigmoid_unknown_loss(pos_fg: &[usize], pos_bg: &[usize], lu: &[f64], d1: f64, d2: f64) -> f64 {
    let mut total = 0.0;
    for (pool, d) in [(pos_fg, d1), (pos_bg, d2)] {
        if !pool.is_empty() {
            total += pool.iter().map(|&i| softplus(-d * lu[i])).sum::<f64>() / pool.len() as f64;
        }
    }
    total
}

pub fn softmax_unknown_loss(selected: &[usize], logits: &[Vec<f64>], unknown: usize) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    selected.iter().map(|&i| ce(&logits[i], unknown)).sum::<f64>() / selected.len() as f64
}

/// Shapes of the flat head parameter vector: trunk `d0 x d` row-major,
/// bias `d`, classifier `d x classes` row-major.
#[derive(Clone, Copy, Debug)]
pub struct HeadShape {
    pub d0: usize,
    pub d: usize,
    pub classes: usize,
    pub alpha: f64,
}

pub struct UnknownTerm<'a> {
    pub sigmoid: bool,
    pub lambda: f64,
    pub d1: f64,
    pub d2: f64,
    pub pos_fg: &'a [usize],
    pub pos_bg: &'a [usize],
}

pub fn head_logits(flat: &[f64], s: HeadShape, x: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    let (tw, rest) = flat.split_at(s.d0 * s.d);
    let (tb, cw) = rest.split_at(s.d);
    let h: Vec<f64> = (0..s.d)
        .map(|j| {
            let pre: f64 = (0..s.d0).map(|r| x[r] * tw[r * s.d + j]).sum::<f64>() + tb[j];
            pre.max(0.0)
        })
        .collect();
    if l2(&h) == 0.0 {
        return vec![0.0; s.classes];
    }
    logits(&h, cw, s.classes, s.alpha, mask)
}

/// Trunk pre-activations, to reject instances sitting on a ReLU kink.
pub fn head_preacts(flat: &[f64], s: HeadShape, x: &[f64]) -> Vec<f64> {
    let (tw, rest) = flat.split_at(s.d0 * s.d);
    let tb = &rest[..s.d];
    (0..s.d)
        .map(|j| (0..s.d0).map(|r| x[r] * tw[r * s.d + j]).sum::<f64>() + tb[j])
        .collect()
}

/// Mean CE over all rows plus `lambda` times the unknown term.
pub fn head_loss(
    flat: &[f64],
    s: HeadShape,
    xs: &[Vec<f64>],
    labels: &[usize],
    mask: Option<&[f64]>,
    unknown: &UnknownTerm,
) -> f64 {
    let ls: Vec<Vec<f64>> = xs.iter().map(|x| head_logits(flat, s, x, mask)).collect();
    let ce_mean = ls.iter().zip(labels).map(|(l, &y)| ce(l, y)).sum::<f64>() / xs.len() as f64;
    let u = s.classes - 2;
    let term = if unknown.sigmoid {
        let lu: Vec<f64> = ls.iter().map(|l| l[u]).collect();
        sigmoid_unknown_loss(unknown.pos_fg, unknown.pos_bg, &lu, unknown.d1, unknown.d2)
    } else {
        let sel: Vec<usize> = unknown.pos_fg.iter().chain(unknown.pos_bg).copied().collect();
        softmax_unknown_loss(&sel, &ls, u)
    };
    ce_mean + unknown.lambda * term
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let a = f(&p);
            p[i] = o - h;
            let b = f(&p);
            p[i] = o;
            (a - b) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the 2-norm; absolute when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = l2(a).max(l2(b));
    if scale < 1e-10 {
        l2(&diff)
    } else {
        l2(&diff) / scale
    }
}

/// Brute-force top-k: repeatedly take the remaining maximum, lowest index on
/// ties.
pub fn brute_top_k(scores: &[f64], pool: &[usize], k: usize) -> Vec<usize> {
    let mut left: Vec<usize> = pool.to_vec();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = i;
            }
        }
        out.push(left.swap_remove(best));
    }
    out
}

/// Ridge objective `|y - a p X w|^2 + a^2 p(1-p) sum_j (|X_j| w_j)^2`, with
/// X rows and w normalized here.
pub fn ridge(y: &[f64], x_rows: &[Vec<f64>], w: &[f64], alpha: f64, p: f64) -> f64 {
    let xs: Vec<Vec<f64>> = x_rows.iter().map(|r| r.iter().map(|v| v / l2(r)).collect()).collect();
    let wn = l2(w);
    let wu: Vec<f64> = w.iter().map(|v| v / wn).collect();
    let d = w.len();
    let mut obj = 0.0;
    for (yi, xi) in y.iter().zip(&xs) {
        let f: f64 = xi.iter().zip(&wu).map(|(a, b)| a * b).sum();
        obj += (yi - alpha * p * f).powi(2);
    }
    for j in 0..d {
        let tau2: f64 = xs.iter().map(|r| r[j] * r[j]).sum();
        obj += alpha * alpha * p * (1.0 - p) * tau2 * wu[j] * wu[j];
    }
    obj
}
