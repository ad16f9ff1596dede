//! Class prototypes and per-class embedding gradients, client and server side.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FedError, Result};
use crate::model::ModelParams;
use crate::numerics::{axpy, softmax, Matrix};

/// Mean embedding per class on one client. Rows of absent classes are zero
/// and must be read through [`LocalPrototypes::get`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPrototypes {
    protos: Matrix,
    counts: Vec<usize>,
}

impl LocalPrototypes {
    pub fn new(protos: Matrix, counts: Vec<usize>) -> Result<Self> {
        if protos.rows() != counts.len() {
            return Err(FedError::shape("LocalPrototypes", protos.rows(), counts.len()));
        }
        Ok(LocalPrototypes { protos, counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn is_present(&self, c: usize) -> bool {
        self.counts[c] > 0
    }

    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes()).filter(|&c| self.is_present(c))
    }

    pub fn get(&self, c: usize) -> Option<&[f64]> {
        self.is_present(c).then(|| self.protos.row(c))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.protos
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoAggregation {
    /// `Σ_k (n_kᶜ/nᶜ)·p_kᶜ`
    #[default]
    Normalized,
    /// The normalized mean further divided by `|Aᶜ|`.
    Literal,
}

/// Server-side prototypes `ℙ` with the contributing client positions `Aᶜ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrototypes {
    protos: Matrix,
    contributors: Vec<Vec<usize>>,
}

impl GlobalPrototypes {
    pub fn new(protos: Matrix, contributors: Vec<Vec<usize>>) -> Result<Self> {
        if protos.rows() != contributors.len() {
            return Err(FedError::shape("GlobalPrototypes", protos.rows(), contributors.len()));
        }
        Ok(GlobalPrototypes { protos, contributors })
    }

    pub fn classes(&self) -> usize {
        self.contributors.len()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    pub fn is_present(&self, c: usize) -> bool {
        !self.contributors[c].is_empty()
    }

    pub fn get(&self, c: usize) -> Option<&[f64]> {
        self.is_present(c).then(|| self.protos.row(c))
    }

    /// Like [`get`](Self::get) but an absent class is an error.
    pub fn require(&self, c: usize) -> Result<&[f64]> {
        self.get(c).ok_or(FedError::AbsentClass(c))
    }

    pub fn contributors(&self, c: usize) -> &[usize] {
        &self.contributors[c]
    }

    pub fn matrix(&self) -> &Matrix {
        &self.protos
    }

    /// A bank where every class is present, e.g. the averaged hyper-prototypes.
    pub fn from_dense(protos: Matrix) -> Self {
        let contributors = vec![vec![0]; protos.rows()];
        GlobalPrototypes { protos, contributors }
    }
}

/// Per-class mean of `∇_z L_CE`. On a client `counts[c]` is `n_kᶜ`; after
/// server aggregation it is `|Aᶜ|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGradients {
    grads: Matrix,
    counts: Vec<usize>,
}

impl ClassGradients {
    pub fn new(grads: Matrix, counts: Vec<usize>) -> Result<Self> {
        if grads.rows() != counts.len() {
            return Err(FedError::shape("ClassGradients", grads.rows(), counts.len()));
        }
        Ok(ClassGradients { grads, counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.grads.cols()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn is_present(&self, c: usize) -> bool {
        self.counts[c] > 0
    }

    pub fn get(&self, c: usize) -> Option<&[f64]> {
        self.is_present(c).then(|| self.grads.row(c))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.grads
    }
}

fn check_dataset(params: &ModelParams, ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(FedError::Empty("client dataset"));
    }
    let cfg = params.config();
    if ds.classes() != cfg.classes {
        return Err(FedError::shape("dataset classes", cfg.classes, ds.classes()));
    }
    Ok(())
}

/// Prototypes and class gradients from a single pass over `ds`.
pub fn local_summary(params: &ModelParams, ds: &LabeledDataset) -> Result<(LocalPrototypes, ClassGradients)> {
    check_dataset(params, ds)?;
    let cfg = params.config();
    let mut protos = Matrix::zeros(cfg.classes, cfg.embed_dim);
    let mut grads = Matrix::zeros(cfg.classes, cfg.embed_dim);
    let counts = ds.class_counts();
    for i in 0..ds.len() {
        let y = ds.y(i);
        let fwd = params.forward(ds.x(i))?;
        let mut r = softmax(&fwd.logits);
        r[y] -= 1.0;
        let dz = params.wc.t_matvec(&r)?;
        axpy(1.0, &fwd.z, protos.row_mut(y));
        axpy(1.0, &dz, grads.row_mut(y));
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let n = n as f64;
            protos.row_mut(c).iter_mut().for_each(|v| *v /= n);
            grads.row_mut(c).iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok((
        LocalPrototypes::new(protos, counts.clone())?,
        ClassGradients::new(grads, counts)?,
    ))
}

pub fn compute_local_prototypes(params: &ModelParams, ds: &LabeledDataset) -> Result<LocalPrototypes> {
    check_dataset(params, ds)?;
    let cfg = params.config();
    let mut protos = Matrix::zeros(cfg.classes, cfg.embed_dim);
    let counts = ds.class_counts();
    for i in 0..ds.len() {
        let z = params.embed(ds.x(i))?;
        axpy(1.0, &z, protos.row_mut(ds.y(i)));
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            protos.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    LocalPrototypes::new(protos, counts)
}

pub fn compute_class_gradients(params: &ModelParams, ds: &LabeledDataset) -> Result<ClassGradients> {
    Ok(local_summary(params, ds)?.1)
}

pub fn aggregate_global_prototypes(locals: &[LocalPrototypes], mode: ProtoAggregation) -> Result<GlobalPrototypes> {
    let first = locals.first().ok_or(FedError::Empty("aggregate_global_prototypes"))?;
    let (classes, dim) = (first.classes(), first.dim());
    let mut protos = Matrix::zeros(classes, dim);
    let mut contributors = vec![Vec::new(); classes];
    for l in locals {
        if l.classes() != classes || l.dim() != dim {
            return Err(FedError::shape("aggregate_global_prototypes", classes, l.classes()));
        }
    }
    for c in 0..classes {
        let total: usize = locals.iter().map(|l| l.counts[c]).sum();
        if total == 0 {
            continue;
        }
        for (k, l) in locals.iter().enumerate() {
            if let Some(p) = l.get(c) {
                contributors[c].push(k);
                axpy(l.counts[c] as f64 / total as f64, p, protos.row_mut(c));
            }
        }
        if mode == ProtoAggregation::Literal {
            let a = contributors[c].len() as f64;
            protos.row_mut(c).iter_mut().for_each(|v| *v /= a);
        }
    }
    GlobalPrototypes::new(protos, contributors)
}

/// Unweighted mean of `g_kᶜ` over the clients holding class `c`.
pub fn aggregate_class_gradients(all: &[ClassGradients]) -> Result<ClassGradients> {
    let first = all.first().ok_or(FedError::Empty("aggregate_class_gradients"))?;
    let (classes, dim) = (first.classes(), first.dim());
    let mut grads = Matrix::zeros(classes, dim);
    let mut counts = vec![0usize; classes];
    for g in all {
        if g.classes() != classes || g.dim() != dim {
            return Err(FedError::shape("aggregate_class_gradients", classes, g.classes()));
        }
        for c in 0..classes {
            if let Some(row) = g.get(c) {
                axpy(1.0, row, grads.row_mut(c));
                counts[c] += 1;
            }
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            grads.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    ClassGradients::new(grads, counts)
}

/// Per-class embedding means over the pooled data. Diagnostic reference only.
pub fn centralized_prototypes_oracle(params: &ModelParams, pooled: &LabeledDataset) -> Result<GlobalPrototypes> {
    let local = compute_local_prototypes(params, pooled)?;
    let contributors = local
        .counts
        .iter()
        .map(|&n| if n > 0 { vec![0] } else { Vec::new() })
        .collect();
    GlobalPrototypes::new(local.protos, contributors)
}
