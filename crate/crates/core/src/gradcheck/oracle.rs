//! Straight-line double-double re-implementations of each checked loss.
//! They share no code with the production paths.

use super::dd::Dd;
use crate::model::ModelConfig;

fn dd(xs: &[f64]) -> Vec<Dd> {
    xs.iter().map(|&x| Dd::new(x)).collect()
}

fn dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (&x, &y)| acc + x * y)
}

fn norm(a: &[Dd]) -> Dd {
    dot(a, a).sqrt()
}

fn cosine(a: &[Dd], b: &[Dd]) -> Dd {
    dot(a, b) / (norm(a) * norm(b))
}

fn softmax(logits: &[Dd]) -> Vec<Dd> {
    let m = logits.iter().fold(logits[0], |acc, &l| acc.max(l));
    let e: Vec<Dd> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s = e.iter().fold(Dd::ZERO, |acc, &v| acc + v);
    e.into_iter().map(|v| v / s).collect()
}

/// Row-major `rows × cols` block of `theta` starting at `*off`.
fn take<'a>(theta: &'a [f64], off: &mut usize, n: usize) -> &'a [f64] {
    let s = &theta[*off..*off + n];
    *off += n;
    s
}

fn affine(w: &[f64], b: &[f64], x: &[Dd]) -> Vec<Dd> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| {
            let row = &w[i * cols..(i + 1) * cols];
            row.iter()
                .zip(x)
                .fold(Dd::new(bi), |acc, (&wij, &xj)| acc + Dd::new(wij) * xj)
        })
        .collect()
}

/// Cross-entropy of the MLP whose flat parameters (w1, b1, w2, b2, wc, bc)
/// are `theta`.
pub fn ce_loss(theta: &[f64], cfg: &ModelConfig, x: &[f64], y: usize) -> Dd {
    let mut off = 0;
    let w1 = take(theta, &mut off, cfg.hidden * cfg.in_dim);
    let b1 = take(theta, &mut off, cfg.hidden);
    let w2 = take(theta, &mut off, cfg.embed_dim * cfg.hidden);
    let b2 = take(theta, &mut off, cfg.embed_dim);
    let wc = take(theta, &mut off, cfg.classes * cfg.embed_dim);
    let bc = take(theta, &mut off, cfg.classes);
    let h: Vec<Dd> = affine(w1, b1, &dd(x))
        .into_iter()
        .map(|v| if v.hi > 0.0 { v } else { Dd::ZERO })
        .collect();
    let z = affine(w2, b2, &h);
    let logits = affine(wc, bc, &z);
    -softmax(&logits)[y].ln()
}

/// `log(1 + Σ_{j≠y} exp((s_j + margin)/τ) / exp(s_y/τ))` with `s_j` the mean
/// cosine between `z` and the members of class `j`'s bank.
pub fn hpcl_loss(z: &[f64], banks: &[Vec<f64>], y: usize, margin: f64, tau: f64) -> Dd {
    let z = dd(z);
    let d = z.len();
    let sims: Vec<Dd> = banks
        .iter()
        .map(|bank| {
            let members = bank.len() / d;
            let total = bank.chunks_exact(d).fold(Dd::ZERO, |acc, m| acc + cosine(&z, &dd(m)));
            total / Dd::new(members as f64)
        })
        .collect();
    let t = Dd::new(tau);
    let pos = (sims[y] / t).exp();
    let neg = sims
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .fold(Dd::ZERO, |acc, (_, &s)| acc + ((s + Dd::new(margin)) / t).exp());
    (Dd::ONE + neg / pos).ln()
}

/// `Σ_q smoothL1(z_q − h_q)`.
pub fn hpal_loss(z: &[f64], h: &[f64]) -> Dd {
    z.iter().zip(h).fold(Dd::ZERO, |acc, (&zq, &hq)| {
        let diff = (Dd::new(zq) - Dd::new(hq)).abs();
        if diff.hi < 1.0 {
            acc + Dd::new(0.5) * diff * diff
        } else {
            acc + diff - Dd::new(0.5)
        }
    })
}

/// `1 − cos(g, Wcᵀ(mean_i softmax(Wc·sᵢ + bc) − e_c))` for one class bank.
pub fn gm_class_loss(bank: &[f64], class: usize, g: &[f64], wc: &[f64], bc: &[f64]) -> Dd {
    let classes = bc.len();
    let dim = g.len();
    let members = bank.len() / dim;
    let mut r = vec![Dd::ZERO; classes];
    for s in bank.chunks_exact(dim) {
        let p = softmax(&affine(wc, bc, &dd(s)));
        for (rk, pk) in r.iter_mut().zip(p) {
            *rk = *rk + pk / Dd::new(members as f64);
        }
    }
    r[class] = r[class] - Dd::ONE;
    let u: Vec<Dd> = (0..dim)
        .map(|q| (0..classes).fold(Dd::ZERO, |acc, k| acc + Dd::new(wc[k * dim + q]) * r[k]))
        .collect();
    Dd::ONE - cosine(&dd(g), &u)
}
