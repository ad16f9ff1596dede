//! Server-side hyper-prototypes: a learnable bank `S ∈ R^{C×I×d}` fitted so
//! that the cross-entropy gradients it induces through the global classifier
//! point the same way as the clients' real per-class embedding gradients.
//!
//! For one vector `s` of class `c` the virtual gradient is
//! `v(s) = Wcᵀ(softmax(Wc·s + bc) − e_c)` and its Jacobian is the symmetric
//! `Wcᵀ(diag(p) − ppᵀ)Wc`, so the matching objective
//! `1 − cos(gᶜ, mean_i v(sᵢᶜ))` has a closed-form gradient in `S`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{NamedTensor, TensorFile};
use crate::error::{FedError, Result};
use crate::numerics::{axpy, cosine_similarity, dot, norm, softmax, stream_id, Matrix, SimRng, NORM_EPS};
use crate::prototypes::ClassGradients;

const REPERTURB_STD: f64 = 1e-3;
const MAX_HALVINGS: usize = 5;
const REPAIR_PURPOSE: u64 = 0x4850_5245_5041_4952;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmConfig {
    /// Inner descent steps per federation round (`M`).
    pub rounds: usize,
    pub inner_lr: f64,
    pub init_std: f64,
    /// Vectors per class (`|I|`).
    pub bank_size: usize,
}

impl Default for GmConfig {
    fn default() -> Self {
        GmConfig {
            rounds: 30,
            inner_lr: 1.0,
            init_std: 1.0,
            bank_size: 5,
        }
    }
}

impl GmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || !(self.inner_lr > 0.0) || self.bank_size == 0 || !(self.init_std >= 0.0) {
            return Err(FedError::InvalidConfig(format!(
                "invalid gradient-matching config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrototypes {
    classes: usize,
    bank_size: usize,
    dim: usize,
    /// Layout `[class][member][dim]`.
    data: Vec<f64>,
}

impl HyperPrototypes {
    pub fn from_vec(classes: usize, bank_size: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * bank_size * dim || bank_size == 0 || dim == 0 {
            return Err(FedError::shape(
                "HyperPrototypes",
                format!("{classes}x{bank_size}x{dim}"),
                data.len(),
            ));
        }
        let s = HyperPrototypes {
            classes,
            bank_size,
            dim,
            data,
        };
        if !s.data.iter().all(|v| v.is_finite()) {
            return Err(FedError::NonFinite("hyper-prototypes".into()));
        }
        Ok(s)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bank_size(&self) -> usize {
        self.bank_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The `|I|·d` values of class `c`, member-major.
    pub fn class_bank(&self, c: usize) -> &[f64] {
        let n = self.bank_size * self.dim;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn vector(&self, c: usize, i: usize) -> &[f64] {
        let off = (c * self.bank_size + i) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// `Hᶜ = mean_i sᵢᶜ`, recomputed on every call.
    pub fn averaged(&self) -> Matrix {
        let mut h = Matrix::zeros(self.classes, self.dim);
        let w = 1.0 / self.bank_size as f64;
        for c in 0..self.classes {
            for member in self.class_bank(c).chunks_exact(self.dim) {
                axpy(w, member, h.row_mut(c));
            }
        }
        h
    }

    /// Replaces any vector whose norm underflowed with a small random one.
    fn repair_norms(&mut self, rng: &mut SimRng) {
        for member in self.data.chunks_exact_mut(self.dim) {
            while norm(member) <= NORM_EPS {
                for v in member.iter_mut() {
                    *v = rng.normal(0.0, REPERTURB_STD);
                }
            }
        }
    }

    fn has_degenerate_member(&self) -> bool {
        self.data.chunks_exact(self.dim).any(|m| norm(m) <= NORM_EPS)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        TensorFile::new(vec![NamedTensor::new(
            "hyperprototypes",
            vec![self.classes, self.bank_size, self.dim],
            self.data.clone(),
        )])
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        let t = tf.get("hyperprototypes")?;
        if t.shape.len() != 3 {
            return Err(FedError::shape("hyperprototypes", "rank 3", t.shape.len()));
        }
        HyperPrototypes::from_vec(t.shape[0], t.shape[1], t.shape[2], t.data.clone())
    }
}

/// Every `sᵢᶜ ~ N(0, init_std²)`; zero-norm draws are re-perturbed.
pub fn init_hyperprototypes(
    classes: usize,
    bank_size: usize,
    dim: usize,
    init_std: f64,
    rng: &mut SimRng,
) -> Result<HyperPrototypes> {
    let data = rng.normal_vec(classes * bank_size * dim, init_std);
    let mut s = HyperPrototypes::from_vec(classes, bank_size, dim, data)?;
    s.repair_norms(rng);
    Ok(s)
}

fn check_classifier(s: &HyperPrototypes, wc: &Matrix, bc: &[f64]) -> Result<()> {
    if wc.rows() != s.classes || wc.cols() != s.dim || bc.len() != s.classes {
        return Err(FedError::shape(
            "hyper-prototype classifier",
            format!("{}x{}", s.classes, s.dim),
            format!("{}x{}", wc.rows(), wc.cols()),
        ));
    }
    Ok(())
}

fn class_probs(wc: &Matrix, bc: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    let mut l = wc.matvec(s)?;
    axpy(1.0, bc, &mut l);
    Ok(softmax(&l))
}

/// `g_HPᶜ = mean_i Wcᵀ(softmax(Wc·sᵢᶜ + bc) − e_c)` for every class.
pub fn virtual_gradients(s: &HyperPrototypes, wc: &Matrix, bc: &[f64]) -> Result<Matrix> {
    check_classifier(s, wc, bc)?;
    let mut out = Matrix::zeros(s.classes, s.dim);
    let w = 1.0 / s.bank_size as f64;
    for c in 0..s.classes {
        let mut r = vec![0.0; s.classes];
        for member in s.class_bank(c).chunks_exact(s.dim) {
            let p = class_probs(wc, bc, member)?;
            axpy(w, &p, &mut r);
        }
        r[c] -= 1.0;
        out.row_mut(c).copy_from_slice(&wc.t_matvec(&r)?);
    }
    Ok(out)
}

/// `1 − cos(g, g_HP)`, in `[0, 2]`.
pub fn gm_loss(g: &[f64], g_hp: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(g, g_hp)?)
}

/// Value and `S`-gradient of `Σ_c L_GM(gᶜ, g_HPᶜ(S))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmEvaluation {
    pub total: f64,
    /// `None` where the class was skipped (absent or zero-norm gradient).
    pub per_class: Vec<Option<f64>>,
    /// Same layout as the bank.
    pub grad: Vec<f64>,
}

impl GmEvaluation {
    pub fn active_classes(&self) -> usize {
        self.per_class.iter().flatten().count()
    }

    /// Mean over active classes; `None` when nothing was matched.
    pub fn mean(&self) -> Option<f64> {
        let n = self.active_classes();
        (n > 0).then(|| self.total / n as f64)
    }
}

pub fn gm_objective(
    s: &HyperPrototypes,
    target: &ClassGradients,
    wc: &Matrix,
    bc: &[f64],
    with_grad: bool,
) -> Result<GmEvaluation> {
    check_classifier(s, wc, bc)?;
    if target.classes() != s.classes || target.dim() != s.dim {
        return Err(FedError::shape("gm_objective target", s.classes, target.classes()));
    }
    let inv_i = 1.0 / s.bank_size as f64;
    let mut total = 0.0;
    let mut per_class = vec![None; s.classes];
    let mut grad = if with_grad { vec![0.0; s.data.len()] } else { Vec::new() };

    for c in 0..s.classes {
        let Some(g) = target.get(c) else { continue };
        let probs: Vec<Vec<f64>> = s
            .class_bank(c)
            .chunks_exact(s.dim)
            .map(|m| class_probs(wc, bc, m))
            .collect::<Result<_>>()?;
        let mut r = vec![0.0; s.classes];
        for p in &probs {
            axpy(inv_i, p, &mut r);
        }
        r[c] -= 1.0;
        let u = wc.t_matvec(&r)?;
        let (ng, nu) = (norm(g), norm(&u));
        if ng <= NORM_EPS || nu <= NORM_EPS {
            continue;
        }
        let cos = (dot(g, &u) / (ng * nu)).clamp(-1.0, 1.0);
        let loss = 1.0 - cos;
        if !loss.is_finite() {
            return Err(FedError::NonFinite(format!("gradient-matching loss for class {c}")));
        }
        total += loss;
        per_class[c] = Some(loss);

        if with_grad {
            // ∂L/∂u = −(ĝ − cos·û)/‖u‖
            let a: Vec<f64> = g
                .iter()
                .zip(&u)
                .map(|(gi, ui)| -(gi / ng - cos * ui / nu) / nu)
                .collect();
            let wa = wc.matvec(&a)?;
            let base = c * s.bank_size * s.dim;
            for (i, p) in probs.iter().enumerate() {
                let pw = dot(p, &wa);
                let t: Vec<f64> = p.iter().zip(&wa).map(|(pk, wk)| pk * (wk - pw)).collect();
                let gs = wc.t_matvec(&t)?;
                let off = base + i * s.dim;
                axpy(inv_i, &gs, &mut grad[off..off + s.dim]);
            }
        }
    }
    Ok(GmEvaluation { total, per_class, grad })
}

/// What one call to [`optimize_hyperprototypes`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct GmTrace {
    pub initial: GmEvaluation,
    pub final_total: f64,
    pub final_mean: Option<f64>,
    pub accepted_steps: usize,
    pub halvings: usize,
}

/// `cfg.rounds` full-gradient steps on the matching objective, classifier
/// frozen. A step that raises the loss is retried at half the step size,
/// up to five times, and dropped if it still does not descend.
pub fn optimize_hyperprototypes(
    s: &HyperPrototypes,
    target: &ClassGradients,
    wc: &Matrix,
    bc: &[f64],
    cfg: &GmConfig,
) -> Result<(HyperPrototypes, GmTrace)> {
    let mut current = s.clone();
    let initial = gm_objective(&current, target, wc, bc, true)?;
    let mut eval = initial.clone();
    let mut accepted_steps = 0;
    let mut halvings = 0;
    if initial.active_classes() == 0 {
        warn!("gradient matching skipped: no class has a usable gradient");
    }

    for step in 0..cfg.rounds {
        if eval.active_classes() == 0 {
            break;
        }
        let mut lr = cfg.inner_lr;
        let mut accepted = None;
        for attempt in 0..=MAX_HALVINGS {
            let mut trial = current.clone();
            axpy(-lr, &eval.grad, &mut trial.data);
            if trial.has_degenerate_member() {
                let mut rng = SimRng::new(step as u64, stream_id(REPAIR_PURPOSE, attempt as u64, 0));
                trial.repair_norms(&mut rng);
            }
            let trial_eval = gm_objective(&trial, target, wc, bc, true)?;
            if trial_eval.total <= eval.total {
                accepted = Some((trial, trial_eval));
                break;
            }
            if attempt < MAX_HALVINGS {
                lr *= 0.5;
                halvings += 1;
            }
        }
        match accepted {
            Some((trial, trial_eval)) => {
                current = trial;
                eval = trial_eval;
                accepted_steps += 1;
            }
            None => break,
        }
    }

    Ok((
        current,
        GmTrace {
            initial,
            final_total: eval.total,
            final_mean: eval.mean(),
            accepted_steps,
            halvings,
        },
    ))
}
