//! The shared model: a two-layer ReLU MLP feature extractor followed by a
//! linear classifier, with hand-written exact gradients and momentum SGD.
//!
//! ```text
//! a = relu(W1·x + b1)        (hidden)
//! z = W2·a + b2              (embedding, dimension d)
//! ℓ = Wc·z + bc              (logits, dimension C)
//! ```

use serde::{Deserialize, Serialize};

use crate::checkpoint::{NamedTensor, TensorFile};
use crate::error::{FedError, Result};
use crate::numerics::{axpy, log_sum_exp, softmax, Matrix, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_dim: 16,
            hidden: 32,
            embed_dim: 16,
            classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(FedError::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(FedError::InvalidConfig("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Parameters of `w = {f, h}`. Also used as the container for gradients and
/// momentum buffers, since those mirror the parameter shapes exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub wc: Matrix,
    pub bc: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradients of one sample's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub params: ModelParams,
    /// `∇_z L_CE = Wcᵀ(softmax(ℓ) − onehot(y))`, excluding any extra term.
    pub ce_embedding_grad: Vec<f64>,
    pub ce_loss: f64,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            w1: Matrix::zeros(cfg.hidden, cfg.in_dim),
            b1: vec![0.0; cfg.hidden],
            w2: Matrix::zeros(cfg.embed_dim, cfg.hidden),
            b2: vec![0.0; cfg.embed_dim],
            wc: Matrix::zeros(cfg.classes, cfg.embed_dim),
            bc: vec![0.0; cfg.classes],
        }
    }

    /// Each layer's weights and bias ~ U(−1/√fan_in, 1/√fan_in).
    pub fn init(cfg: &ModelConfig, rng: &mut SimRng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ModelParams::zeros(cfg);
        let layers: [(&mut Matrix, &mut Vec<f64>); 3] =
            [(&mut p.w1, &mut p.b1), (&mut p.w2, &mut p.b2), (&mut p.wc, &mut p.bc)];
        for (w, b) in layers {
            let bound = 1.0 / (w.cols() as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.uniform(-bound, bound);
            }
            for v in b.iter_mut() {
                *v = rng.uniform(-bound, bound);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            in_dim: self.w1.cols(),
            hidden: self.w1.rows(),
            embed_dim: self.w2.rows(),
            classes: self.wc.rows(),
        }
    }

    fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.wc.as_slice(),
            &self.bc,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.wc.as_mut_slice(),
            &mut self.bc,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Flat view in the order w1, b1, w2, b2, wc, bc.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn from_flat(cfg: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut p = ModelParams::zeros(cfg);
        if flat.len() != p.num_params() {
            return Err(FedError::shape("ModelParams::from_flat", p.num_params(), flat.len()));
        }
        let mut off = 0;
        for s in p.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(p)
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.config() == other.config()
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for dst in self.slices_mut() {
            for v in dst.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn classifier(&self) -> (&Matrix, &[f64]) {
        (&self.wc, &self.bc)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let mut hidden_pre = self.w1.matvec(x)?;
        axpy(1.0, &self.b1, &mut hidden_pre);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut z = self.w2.matvec(&hidden)?;
        axpy(1.0, &self.b2, &mut z);
        let logits = self.logits(&z)?;
        Ok(Forward {
            hidden_pre,
            hidden,
            z,
            logits,
        })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.z)
    }

    /// Classifier head only: `Wc·z + bc`.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.wc.matvec(z)?;
        axpy(1.0, &self.bc, &mut l);
        Ok(l)
    }

    /// Exact gradient of `L_CE(h(f(x)), y)` plus `extra_embedding_grad`
    /// back-propagated through `f`.
    pub fn backward(&self, x: &[f64], y: usize, extra_embedding_grad: &[f64]) -> Result<GradientTape> {
        let fwd = self.forward(x)?;
        let mut params = ModelParams::zeros(&self.config());
        let (ce_loss, ce_embedding_grad) = self.accumulate_grads(x, &fwd, y, extra_embedding_grad, 1.0, &mut params)?;
        Ok(GradientTape {
            params,
            ce_embedding_grad,
            ce_loss,
        })
    }

    /// Adds `weight · ∇_w[L_CE + ⟨extra, z⟩]` into `acc` for an already computed
    /// forward pass. Returns the CE loss and `∇_z L_CE`.
    pub fn accumulate_grads(
        &self,
        x: &[f64],
        fwd: &Forward,
        y: usize,
        extra_embedding_grad: &[f64],
        weight: f64,
        acc: &mut ModelParams,
    ) -> Result<(f64, Vec<f64>)> {
        let classes = self.wc.rows();
        if y >= classes {
            return Err(FedError::LabelOutOfRange { label: y, classes });
        }
        if extra_embedding_grad.len() != fwd.z.len() {
            return Err(FedError::shape(
                "backward extra_embedding_grad",
                fwd.z.len(),
                extra_embedding_grad.len(),
            ));
        }
        let ce_loss = log_sum_exp(&fwd.logits) - fwd.logits[y];
        let mut dlogits = softmax(&fwd.logits);
        dlogits[y] -= 1.0;

        acc.wc.add_outer(weight, &dlogits, &fwd.z);
        axpy(weight, &dlogits, &mut acc.bc);

        let ce_dz = self.wc.t_matvec(&dlogits)?;
        let mut dz = ce_dz.clone();
        axpy(1.0, extra_embedding_grad, &mut dz);

        acc.w2.add_outer(weight, &dz, &fwd.hidden);
        axpy(weight, &dz, &mut acc.b2);

        let mut dh = self.w2.t_matvec(&dz)?;
        for (g, &pre) in dh.iter_mut().zip(&fwd.hidden_pre) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        acc.w1.add_outer(weight, &dh, x);
        axpy(weight, &dh, &mut acc.b1);

        Ok((ce_loss, ce_dz))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let t = |name: &str, m: &Matrix| NamedTensor::new(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
        let v = |name: &str, b: &[f64]| NamedTensor::new(name, vec![b.len()], b.to_vec());
        TensorFile::new(vec![
            t("w1", &self.w1),
            v("b1", &self.b1),
            t("w2", &self.w2),
            v("b2", &self.b2),
            t("wc", &self.wc),
            v("bc", &self.bc),
        ])
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        let mat = |name: &str| -> Result<Matrix> {
            let t = tf.get(name)?;
            if t.shape.len() != 2 {
                return Err(FedError::shape("checkpoint", "rank 2", t.shape.len()));
            }
            Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone())
        };
        let vecn = |name: &str| -> Result<Vec<f64>> { Ok(tf.get(name)?.data.clone()) };
        let p = ModelParams {
            w1: mat("w1")?,
            b1: vecn("b1")?,
            w2: mat("w2")?,
            b2: vecn("b2")?,
            wc: mat("wc")?,
            bc: vecn("bc")?,
        };
        let cfg = p.config();
        if p.b1.len() != cfg.hidden
            || p.w2.cols() != cfg.hidden
            || p.b2.len() != cfg.embed_dim
            || p.wc.cols() != cfg.embed_dim
            || p.bc.len() != cfg.classes
        {
            return Err(FedError::shape("checkpoint", "consistent layer shapes", "mismatch"));
        }
        Ok(p)
    }
}

/// Classic momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ModelParams>,
}

impl Default for SgdState {
    fn default() -> Self {
        SgdState::new(0.01, 0.9, 1e-5).expect("defaults are valid")
    }
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(FedError::InvalidConfig(format!(
                "sgd: lr={learning_rate} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    /// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if !params.same_shape(grads) {
            return Err(FedError::shape(
                "sgd_step",
                format!("{:?}", params.config()),
                format!("{:?}", grads.config()),
            ));
        }
        let v = self
            .velocity
            .get_or_insert_with(|| ModelParams::zeros(&params.config()));
        v.scale_in_place(self.momentum);
        v.add_scaled(1.0, grads);
        if self.weight_decay != 0.0 {
            v.add_scaled(self.weight_decay, params);
        }
        params.add_scaled(-self.learning_rate, v);
        Ok(())
    }
}

/// Elementwise convex combination `Σ wₖ·paramsₖ`.
pub fn aggregate_params(clients: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = clients.first().ok_or(FedError::Empty("aggregate_params"))?;
    if clients.len() != weights.len() {
        return Err(FedError::shape(
            "aggregate_params weights",
            clients.len(),
            weights.len(),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(FedError::InvalidConfig(
            "aggregation weights must be non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(FedError::InvalidConfig(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }
    let mut out = ModelParams::zeros(&first.config());
    for (p, &w) in clients.iter().zip(weights) {
        if !p.same_shape(first) {
            return Err(FedError::shape(
                "aggregate_params",
                format!("{:?}", first.config()),
                format!("{:?}", p.config()),
            ));
        }
        out.add_scaled(w, p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            in_dim: 4,
            hidden: 5,
            embed_dim: 3,
            classes: 3,
        }
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = ModelParams::zeros(&small_cfg());
        let f = p.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(f.z.iter().all(|&v| v == 0.0));
        assert!(f.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layers_pass_nonnegative_input() {
        let cfg = ModelConfig {
            in_dim: 4,
            hidden: 4,
            embed_dim: 4,
            classes: 2,
        };
        let mut p = ModelParams::zeros(&cfg);
        p.w1 = Matrix::identity(4);
        p.w2 = Matrix::identity(4);
        let x = [0.0, 1.5, 2.0, 0.25];
        assert_eq!(p.embed(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let cfg = small_cfg();
        let mut rng = SimRng::new(11, 0);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let x: Vec<f64> = rng.normal_vec(cfg.in_dim, 1.0);

        let mut h = vec![0.0; cfg.hidden];
        for i in 0..cfg.hidden {
            let mut s = p.b1[i];
            for j in 0..cfg.in_dim {
                s += p.w1[(i, j)] * x[j];
            }
            h[i] = if s > 0.0 { s } else { 0.0 };
        }
        let mut z = vec![0.0; cfg.embed_dim];
        for i in 0..cfg.embed_dim {
            z[i] = p.b2[i] + (0..cfg.hidden).map(|j| p.w2[(i, j)] * h[j]).sum::<f64>();
        }
        let logits: Vec<f64> = (0..cfg.classes).map(|c| p.bc[c] + dot(p.wc.row(c), &z)).collect();

        let f = p.forward(&x).unwrap();
        for (a, b) in f.z.iter().zip(&z) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        for (a, b) in f.logits.iter().zip(&logits) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn symmetric_logits_give_half_residuals() {
        let cfg = ModelConfig {
            in_dim: 2,
            hidden: 2,
            embed_dim: 2,
            classes: 2,
        };
        let mut p = ModelParams::zeros(&cfg);
        p.wc = Matrix::identity(2);
        let tape = p.backward(&[1.0, 1.0], 0, &[0.0, 0.0]).unwrap();
        // z = 0 so logits are (0, 0); ∇ℓ = (−½, ½) shows up in bc.
        assert_eq!(tape.params.bc, vec![-0.5, 0.5]);
        assert_eq!(tape.ce_embedding_grad, vec![-0.5, 0.5]);
        assert_abs_diff_eq!(tape.ce_loss, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn zero_extra_grad_equals_plain_ce() {
        let cfg = small_cfg();
        let mut rng = SimRng::new(5, 0);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let x = rng.normal_vec(cfg.in_dim, 1.0);
        let a = p.backward(&x, 1, &[0.0; 3]).unwrap();
        let fwd = p.forward(&x).unwrap();
        let mut b = ModelParams::zeros(&cfg);
        p.accumulate_grads(&x, &fwd, 1, &[0.0; 3], 1.0, &mut b).unwrap();
        assert_eq!(a.params, b);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let p = ModelParams::zeros(&small_cfg());
        assert!(matches!(
            p.backward(&[0.0; 4], 3, &[0.0; 3]),
            Err(FedError::LabelOutOfRange { .. })
        ));
        assert!(p.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let cfg = small_cfg();
        let mut rng = SimRng::new(1, 0);
        let p0 = ModelParams::init(&cfg, &mut rng).unwrap();
        let g = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut p = p0.clone();
        let mut s = SgdState::new(0.0, 0.9, 1e-5).unwrap();
        s.step(&mut p, &g).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn sgd_vanilla_step() {
        let cfg = small_cfg();
        let mut rng = SimRng::new(2, 0);
        let p0 = ModelParams::init(&cfg, &mut rng).unwrap();
        let g = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut p = p0.clone();
        let mut s = SgdState::new(0.1, 0.0, 0.0).unwrap();
        s.step(&mut p, &g).unwrap();
        for ((a, b), c) in p.flatten().iter().zip(p0.flatten()).zip(g.flatten()) {
            assert_eq!(*a, b - 0.1 * c);
        }
    }

    #[test]
    fn momentum_second_step_is_1_9_eta_g() {
        let cfg = small_cfg();
        let mut rng = SimRng::new(3, 0);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        let g = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut s = SgdState::new(0.01, 0.9, 0.0).unwrap();
        s.step(&mut p, &g).unwrap();
        let before = p.flatten();
        s.step(&mut p, &g).unwrap();
        for ((a, b), gi) in p.flatten().iter().zip(before).zip(g.flatten()) {
            assert_abs_diff_eq!(b - a, 0.01 * 1.9 * gi, epsilon = 1e-15);
        }
    }

    #[test]
    fn aggregate_fixtures() {
        let cfg = small_cfg();
        let mut rng = SimRng::new(4, 0);
        let a = ModelParams::init(&cfg, &mut rng).unwrap();
        let b = ModelParams::init(&cfg, &mut rng).unwrap();
        assert_eq!(aggregate_params(&[&a], &[1.0]).unwrap(), a);
        let same = aggregate_params(&[&a, &a], &[0.5, 0.5]).unwrap();
        for (x, y) in same.flatten().iter().zip(a.flatten()) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
        }
        let mix = aggregate_params(&[&a, &b], &[0.25, 0.75]).unwrap();
        for ((m, x), y) in mix.flatten().iter().zip(a.flatten()).zip(b.flatten()) {
            assert_abs_diff_eq!(*m, 0.25 * x + 0.75 * y, epsilon = 1e-15);
        }
        assert!(aggregate_params(&[], &[]).is_err());
        assert!(aggregate_params(&[&a, &b], &[0.5, 0.6]).is_err());
        assert!(aggregate_params(&[&a, &b], &[1.5, -0.5]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let mut rng = SimRng::new(9, 0);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let json = p.to_tensor_file().to_json().unwrap();
        let back = ModelParams::from_tensor_file(&TensorFile::from_json(&json).unwrap()).unwrap();
        let bits = |m: &ModelParams| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&back));
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(seed in 0u64..1000, w in 0.0..1.0f64) {
            let cfg = small_cfg();
            let mut rng = SimRng::new(seed, 0);
            let a = ModelParams::init(&cfg, &mut rng).unwrap();
            let b = ModelParams::init(&cfg, &mut rng).unwrap();
            let ab = aggregate_params(&[&a, &b], &[w, 1.0 - w]).unwrap();
            let ba = aggregate_params(&[&b, &a], &[1.0 - w, w]).unwrap();
            for (x, y) in ab.flatten().iter().zip(ba.flatten()) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let cfg = small_cfg();
            let mut rng = SimRng::new(seed, 0);
            let p = ModelParams::init(&cfg, &mut rng).unwrap();
            let x = rng.normal_vec(cfg.in_dim, 1.0);
            prop_assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
        }
    }
}
