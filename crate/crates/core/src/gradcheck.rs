//! Central finite-difference checks of every hand-written gradient.
//!
//! Each suite draws random instances, perturbs one coordinate at a time by
//! `±step` and compares `(f(θ+h) − f(θ−h)) / 2h` against the analytic
//! gradient on every coordinate whose magnitude exceeds a floor. The loss
//! values on the numeric side come from independent double-double
//! implementations, so rounding noise stays far below the step's truncation
//! error even for coordinates near the floor.

mod dd;
mod oracle;

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::hyperproto::{gm_objective, HyperPrototypes};
use crate::losses::{hpal_loss, hpcl_loss, DEFAULT_TAU};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{stream_id, Matrix, SimRng};
use crate::prototypes::ClassGradients;
use dd::Dd;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_FLOOR: f64 = 1e-8;
pub const DEFAULT_INSTANCES: usize = 100;

/// Inputs closer than this to a ReLU kink are redrawn.
const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Suite {
    CrossEntropyBackward,
    HpclEmbedding,
    HpalEmbedding,
    GradientMatching,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::CrossEntropyBackward,
        Suite::HpclEmbedding,
        Suite::HpalEmbedding,
        Suite::GradientMatching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::CrossEntropyBackward => "ce-backward",
            Suite::HpclEmbedding => "hpcl-dz",
            Suite::HpalEmbedding => "hpal-dz",
            Suite::GradientMatching => "gm-ds",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: DEFAULT_INSTANCES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            floor: DEFAULT_FLOOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mismatch {
    pub instance: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub suite: Suite,
    pub instances: usize,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {} instances, {} coordinates, {} failures, max rel err {:.2e} ({:.2}s)",
            self.suite.name(),
            self.instances,
            self.checked,
            self.failures,
            self.max_rel_error,
            self.seconds
        )
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

struct Tally {
    cfg: GradcheckConfig,
    checked: usize,
    failures: usize,
    max_rel_error: f64,
    worst: Option<Mismatch>,
}

impl Tally {
    fn new(cfg: GradcheckConfig) -> Self {
        Tally {
            cfg,
            checked: 0,
            failures: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    /// Compares `analytic` against central differences of `f`, where
    /// `f(i, x)` evaluates the loss at `x`, the point with coordinate `i`
    /// perturbed.
    fn check(&mut self, instance: usize, point: &[f64], analytic: &[f64], mut f: impl FnMut(usize, &[f64]) -> Dd) {
        let h = self.cfg.step;
        let mut x = point.to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            if a.abs() <= self.cfg.floor {
                continue;
            }
            let (xp, xm) = (point[i] + h, point[i] - h);
            x[i] = xp;
            let up = f(i, &x);
            x[i] = xm;
            let down = f(i, &x);
            x[i] = point[i];
            // divide by the step actually taken after rounding xp and xm
            let n = (up - down).to_f64() / (xp - xm);
            let e = rel_error(a, n);
            self.checked += 1;
            if e >= self.cfg.tolerance {
                self.failures += 1;
            }
            if e > self.max_rel_error || self.worst.is_none() {
                self.max_rel_error = self.max_rel_error.max(e);
                self.worst = Some(Mismatch {
                    instance,
                    coordinate: i,
                    analytic: a,
                    numeric: n,
                    rel_error: e,
                });
            }
        }
    }

    fn finish(self, suite: Suite, started: Instant) -> GradcheckReport {
        GradcheckReport {
            suite,
            instances: self.cfg.instances,
            checked: self.checked,
            failures: self.failures,
            max_rel_error: self.max_rel_error,
            worst: self.worst,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn suite_rng(cfg: &GradcheckConfig, suite: Suite, instance: usize) -> SimRng {
    SimRng::new(cfg.seed, stream_id(100 + suite as u64, instance as u64, 0))
}

fn random_bank(classes: usize, members: usize, dim: usize, rng: &mut SimRng) -> Result<HyperPrototypes> {
    HyperPrototypes::from_vec(classes, members, dim, rng.normal_vec(classes * members * dim, 1.0))
}

fn ce_instance(rng: &mut SimRng, cfg: &ModelConfig) -> Result<(ModelParams, Vec<f64>, usize)> {
    loop {
        let params = ModelParams::init(cfg, rng)?;
        let x = rng.normal_vec(cfg.in_dim, 1.0);
        let y = (rng.next_u64() % cfg.classes as u64) as usize;
        let fwd = params.forward(&x)?;
        if fwd.hidden_pre.iter().all(|p| p.abs() > KINK_MARGIN) {
            return Ok((params, x, y));
        }
    }
}

/// Cross-entropy gradient w.r.t. every model parameter.
pub fn check_ce_backward(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut tally = Tally::new(*cfg);
    let model = ModelConfig::default();
    for inst in 0..cfg.instances {
        let mut rng = suite_rng(cfg, Suite::CrossEntropyBackward, inst);
        let (params, x, y) = ce_instance(&mut rng, &model)?;
        let tape = params.backward(&x, y, &vec![0.0; model.embed_dim])?;
        let theta = params.flatten();
        tally.check(inst, &theta, &tape.params.flatten(), |_, t| {
            oracle::ce_loss(t, &model, &x, y)
        });
    }
    Ok(tally.finish(Suite::CrossEntropyBackward, started))
}

/// Contrastive loss gradient w.r.t. the embedding.
pub fn check_hpcl(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut tally = Tally::new(*cfg);
    for inst in 0..cfg.instances {
        let mut rng = suite_rng(cfg, Suite::HpclEmbedding, inst);
        let (classes, members, dim) = (10, 5, 16);
        let bank = random_bank(classes, members, dim, &mut rng)?;
        let z = rng.normal_vec(dim, 1.0);
        let y = (rng.next_u64() % classes as u64) as usize;
        let margin = rng.uniform(0.0, 0.5);
        let (_, g) = hpcl_loss(&z, y, &bank, margin, DEFAULT_TAU)?;
        let banks: Vec<Vec<f64>> = (0..classes).map(|c| bank.class_bank(c).to_vec()).collect();
        tally.check(inst, &z, &g, |_, zz| {
            oracle::hpcl_loss(zz, &banks, y, margin, DEFAULT_TAU)
        });
    }
    Ok(tally.finish(Suite::HpclEmbedding, started))
}

/// Smooth-L1 alignment gradient w.r.t. the embedding; differences cover
/// both the quadratic and the linear branch.
pub fn check_hpal(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut tally = Tally::new(*cfg);
    for inst in 0..cfg.instances {
        let mut rng = suite_rng(cfg, Suite::HpalEmbedding, inst);
        let (classes, dim) = (10, 16);
        let h = Matrix::from_vec(classes, dim, rng.normal_vec(classes * dim, 1.0))?;
        let z = rng.normal_vec(dim, 1.5);
        let y = (rng.next_u64() % classes as u64) as usize;
        let (_, g) = hpal_loss(&z, y, &h)?;
        tally.check(inst, &z, &g, |_, zz| oracle::hpal_loss(zz, h.row(y)));
    }
    Ok(tally.finish(Suite::HpalEmbedding, started))
}

/// Matching objective gradient w.r.t. every hyper-prototype coordinate.
pub fn check_gm(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut tally = Tally::new(*cfg);
    for inst in 0..cfg.instances {
        let mut rng = suite_rng(cfg, Suite::GradientMatching, inst);
        let (classes, members, dim) = (10, 5, 16);
        let s = random_bank(classes, members, dim, &mut rng)?;
        // classifier drawn like the model's own initialization
        let bound = 1.0 / (dim as f64).sqrt();
        let wc_data = (0..classes * dim).map(|_| rng.uniform(-bound, bound)).collect();
        let wc = Matrix::from_vec(classes, dim, wc_data)?;
        let bc = (0..classes).map(|_| rng.uniform(-bound, bound)).collect::<Vec<_>>();
        let target = ClassGradients::new(
            Matrix::from_vec(classes, dim, rng.normal_vec(classes * dim, 1.0))?,
            vec![1; classes],
        )?;
        let eval = gm_objective(&s, &target, &wc, &bc, true)?;
        let block = members * dim;
        // other classes' terms do not depend on coordinate i and cancel exactly
        tally.check(inst, s.as_slice(), &eval.grad, |i, data| {
            let c = i / block;
            let bank = &data[c * block..(c + 1) * block];
            oracle::gm_class_loss(bank, c, target.matrix().row(c), wc.as_slice(), &bc)
        });
    }
    Ok(tally.finish(Suite::GradientMatching, started))
}

pub fn run_suite(suite: Suite, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    match suite {
        Suite::CrossEntropyBackward => check_ce_backward(cfg),
        Suite::HpclEmbedding => check_hpcl(cfg),
        Suite::HpalEmbedding => check_hpal(cfg),
        Suite::GradientMatching => check_gm(cfg),
    }
}

pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    Suite::ALL.iter().map(|&s| run_suite(s, cfg)).collect()
}
