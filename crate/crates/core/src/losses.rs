//! Client-side objective terms. Each returns its value and its gradient with
//! respect to the embedding `z`, which the model back-propagates through the
//! feature extractor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::hyperproto::HyperPrototypes;
use crate::numerics::{
    axpy, cosine_grad_wrt_first, cosine_similarity, l2_distance, log_sum_exp, sigmoid, smooth_l1_elem, smooth_l1_grad,
    softplus, Matrix,
};
use crate::prototypes::{GlobalPrototypes, LocalPrototypes};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_PROTO_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedproto")]
    FedProto,
    /// FedProto with the global prototypes replaced by averaged hyper-prototypes.
    #[serde(rename = "fedproto-hp")]
    FedProtoHp,
    #[serde(rename = "fedhpro")]
    FedHPro,
    #[serde(rename = "fedhpro-no-hpcl")]
    FedHProNoHpcl,
    #[serde(rename = "fedhpro-no-hpal")]
    FedHProNoHpal,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedAvg,
        Strategy::FedProto,
        Strategy::FedProtoHp,
        Strategy::FedHPro,
        Strategy::FedHProNoHpcl,
        Strategy::FedHProNoHpal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProto => "fedproto",
            Strategy::FedProtoHp => "fedproto-hp",
            Strategy::FedHPro => "fedhpro",
            Strategy::FedHProNoHpcl => "fedhpro-no-hpcl",
            Strategy::FedHProNoHpal => "fedhpro-no-hpal",
        }
    }

    pub fn uses_hpcl(self) -> bool {
        matches!(self, Strategy::FedHPro | Strategy::FedHProNoHpal)
    }

    pub fn uses_hpal(self) -> bool {
        matches!(self, Strategy::FedHPro | Strategy::FedHProNoHpcl)
    }

    pub fn uses_proto_reg(self) -> bool {
        matches!(self, Strategy::FedProto | Strategy::FedProtoHp)
    }

    /// Whether the server maintains and optimizes a hyper-prototype bank.
    pub fn uses_hyperprototypes(self) -> bool {
        matches!(
            self,
            Strategy::FedProtoHp | Strategy::FedHPro | Strategy::FedHProNoHpcl | Strategy::FedHProNoHpal
        )
    }

    /// Whether training reads the aggregated global prototypes.
    pub fn uses_global_prototypes(self) -> bool {
        self == Strategy::FedProto
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Strategy {
    type Err = FedError;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Strategy::ALL.into_iter().find(|st| st.name() == key).ok_or_else(|| {
            let valid: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
            FedError::InvalidConfig(format!("unknown strategy '{s}' (valid: {})", valid.join(", ")))
        })
    }
}

/// `d_k = (C−1)⁻² Σ_{c1} Σ_{c2≠c1} ‖p^{c1} − p^{c2}‖` over present classes.
pub fn client_margin(locals: &LocalPrototypes, classes: usize) -> f64 {
    let present: Vec<usize> = locals.present_classes().collect();
    if present.len() < 2 || classes < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for &a in &present {
        for &b in &present {
            if a != b {
                sum += l2_distance(locals.get(a).unwrap(), locals.get(b).unwrap());
            }
        }
    }
    let norm = ((classes - 1) * (classes - 1)) as f64;
    sum / norm
}

/// Mean cosine between `z` and each member of a class bank (`|I|·d` values).
pub fn hp_similarity(z: &[f64], bank: &[f64]) -> Result<f64> {
    let d = z.len();
    if d == 0 || bank.is_empty() || !bank.len().is_multiple_of(d) {
        return Err(FedError::shape("hp_similarity", d, bank.len()));
    }
    let members = bank.len() / d;
    let mut s = 0.0;
    for m in bank.chunks_exact(d) {
        s += cosine_similarity(z, m)?;
    }
    Ok(s / members as f64)
}

fn hp_similarity_with_grad(z: &[f64], bank: &[f64]) -> Result<(f64, Vec<f64>)> {
    let d = z.len();
    if d == 0 || bank.is_empty() || !bank.len().is_multiple_of(d) {
        return Err(FedError::shape("hp_similarity", d, bank.len()));
    }
    let w = 1.0 / (bank.len() / d) as f64;
    let mut s = 0.0;
    let mut g = vec![0.0; d];
    for m in bank.chunks_exact(d) {
        let (cos, dcos) = cosine_grad_wrt_first(z, m)?;
        s += w * cos;
        axpy(w, &dcos, &mut g);
    }
    Ok((s, g))
}

/// Contrastive loss against the hyper-prototype banks:
/// `log(1 + Σ_{j≠c} exp((s_j + d_k)/τ) / exp(s_c/τ))`, evaluated as
/// `softplus(logsumexp_j((s_j + d_k)/τ) − s_c/τ)`.
pub fn hpcl_loss(z: &[f64], label: usize, bank: &HyperPrototypes, margin: f64, tau: f64) -> Result<(f64, Vec<f64>)> {
    let classes = bank.classes();
    if label >= classes {
        return Err(FedError::LabelOutOfRange { label, classes });
    }
    if z.len() != bank.dim() {
        return Err(FedError::shape("hpcl_loss", bank.dim(), z.len()));
    }
    if !(tau > 0.0) {
        return Err(FedError::InvalidConfig(format!("temperature must be > 0, got {tau}")));
    }
    if classes < 2 {
        return Ok((0.0, vec![0.0; z.len()]));
    }
    let (s_pos, g_pos) = hp_similarity_with_grad(z, bank.class_bank(label))?;
    let mut neg_logits = Vec::with_capacity(classes - 1);
    let mut neg_grads = Vec::with_capacity(classes - 1);
    for j in (0..classes).filter(|&j| j != label) {
        let (s, g) = hp_similarity_with_grad(z, bank.class_bank(j))?;
        neg_logits.push((s + margin) / tau);
        neg_grads.push(g);
    }
    let lse = log_sum_exp(&neg_logits);
    let m = lse - s_pos / tau;
    let loss = softplus(m);

    // ∂L/∂z = σ(m)·[Σ_j softmax_j ∂s_j/∂z − ∂s_c/∂z] / τ
    let outer = sigmoid(m) / tau;
    let mut grad = vec![0.0; z.len()];
    for (nl, ng) in neg_logits.iter().zip(&neg_grads) {
        axpy(outer * (nl - lse).exp(), ng, &mut grad);
    }
    axpy(-outer, &g_pos, &mut grad);
    Ok((loss, grad))
}

/// Dimension-wise smooth-L1 distance to `Hᶜ`.
pub fn hpal_loss(z: &[f64], label: usize, averaged: &Matrix) -> Result<(f64, Vec<f64>)> {
    if label >= averaged.rows() {
        return Err(FedError::AbsentClass(label));
    }
    let h = averaged.row(label);
    if h.len() != z.len() {
        return Err(FedError::shape("hpal_loss", h.len(), z.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (zq, hq) in z.iter().zip(h) {
        let diff = zq - hq;
        loss += smooth_l1_elem(diff);
        grad.push(smooth_l1_grad(diff));
    }
    Ok((loss, grad))
}

/// `λ‖z − pᶜ‖²`; `None` when class `c` has no prototype yet.
pub fn fedproto_reg(
    z: &[f64],
    label: usize,
    protos: &GlobalPrototypes,
    lambda: f64,
) -> Result<Option<(f64, Vec<f64>)>> {
    if label >= protos.classes() {
        return Err(FedError::LabelOutOfRange {
            label,
            classes: protos.classes(),
        });
    }
    let Some(p) = protos.get(label) else {
        return Ok(None);
    };
    if p.len() != z.len() {
        return Err(FedError::shape("fedproto_reg", p.len(), z.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (zq, pq) in z.iter().zip(p) {
        let diff = zq - pq;
        loss += diff * diff;
        grad.push(2.0 * lambda * diff);
    }
    Ok(Some((lambda * loss, grad)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub hpcl: f64,
    pub hpal: f64,
    /// FedProto-style regularizer; zero for the FedHPro family.
    pub proto: f64,
    pub total: f64,
    /// Gradient of every non-CE term w.r.t. `z`; CE is handled by the model.
    pub embedding_grad: Vec<f64>,
}

/// Server-provided signals a client's loss may read.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub strategy: Strategy,
    pub hyper: Option<&'a HyperPrototypes>,
    pub averaged: Option<&'a Matrix>,
    /// Prototype bank pulled toward by the FedProto regularizer (`ℙ`, or `H`
    /// for [`Strategy::FedProtoHp`]).
    pub anchors: Option<&'a GlobalPrototypes>,
    pub margin: f64,
    pub tau: f64,
    pub proto_lambda: f64,
}

impl<'a> LossContext<'a> {
    pub fn plain(strategy: Strategy) -> Self {
        LossContext {
            strategy,
            hyper: None,
            averaged: None,
            anchors: None,
            margin: 0.0,
            tau: DEFAULT_TAU,
            proto_lambda: DEFAULT_PROTO_LAMBDA,
        }
    }
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(FedError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

pub fn total_loss(z: &[f64], logits: &[f64], label: usize, ctx: &LossContext<'_>) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, label)?;
    let mut out = LossBreakdown {
        ce,
        hpcl: 0.0,
        hpal: 0.0,
        proto: 0.0,
        total: 0.0,
        embedding_grad: vec![0.0; z.len()],
    };
    let st = ctx.strategy;
    if st.uses_hpcl() {
        let bank = ctx
            .hyper
            .ok_or_else(|| FedError::InvalidConfig("HPCL needs hyper-prototypes".into()))?;
        let (l, g) = hpcl_loss(z, label, bank, ctx.margin, ctx.tau)?;
        out.hpcl = l;
        axpy(1.0, &g, &mut out.embedding_grad);
    }
    if st.uses_hpal() {
        let h = ctx
            .averaged
            .ok_or_else(|| FedError::InvalidConfig("HPAL needs averaged hyper-prototypes".into()))?;
        let (l, g) = hpal_loss(z, label, h)?;
        out.hpal = l;
        axpy(1.0, &g, &mut out.embedding_grad);
    }
    if st.uses_proto_reg() {
        if let Some(anchors) = ctx.anchors {
            if let Some((l, g)) = fedproto_reg(z, label, anchors, ctx.proto_lambda)? {
                out.proto = l;
                axpy(1.0, &g, &mut out.embedding_grad);
            }
        }
    }
    out.total = out.ce + out.hpcl + out.hpal + out.proto;
    if !out.total.is_finite() {
        return Err(FedError::NonFinite("client loss".into()));
    }
    Ok(out)
}
