//! Server/client round loop shared by every strategy.
//!
//! Clients train in parallel on a rayon pool, but every client draws from its
//! own `(round, client)` RNG stream and the server folds results in ascending
//! client order, so the worker count never changes the output.

use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FedError, Result};
use crate::hyperproto::{init_hyperprototypes, optimize_hyperprototypes, GmConfig, HyperPrototypes};
use crate::losses::{client_margin, total_loss, LossContext, Strategy, DEFAULT_PROTO_LAMBDA, DEFAULT_TAU};
use crate::metrics::{evaluate, fairness, prototype_distances, Evaluation, RoundRecord};
use crate::model::{aggregate_params, ModelConfig, ModelParams, SgdState};
use crate::numerics::{stream_id, Matrix, SimRng};
use crate::prototypes::{
    aggregate_class_gradients, aggregate_global_prototypes, centralized_prototypes_oracle, compute_local_prototypes,
    local_summary, ClassGradients, GlobalPrototypes, LocalPrototypes, ProtoAggregation,
};

const PURPOSE_SELECT: u64 = 1;
const PURPOSE_CLIENT: u64 = 2;
const PURPOSE_HYPER: u64 = 3;

/// Stream used to initialize the global model.
pub const MODEL_INIT_STREAM: u64 = 0;

pub fn client_stream(round: usize, client: usize) -> u64 {
    stream_id(PURPOSE_CLIENT, round as u64, client as u64)
}

pub fn selection_stream(round: usize) -> u64 {
    stream_id(PURPOSE_SELECT, round as u64, 0)
}

pub fn hyper_init_stream() -> u64 {
    stream_id(PURPOSE_HYPER, 0, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Fraction of clients sampled each round; `⌈f·K⌉` clients take part.
    pub participation: f64,
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub proto_lambda: f64,
    pub gm: GmConfig,
    pub proto_aggregation: ProtoAggregation,
    #[serde(skip)]
    pub workers: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            strategy: Strategy::FedHPro,
            seed: 0,
            rounds: 100,
            local_epochs: 10,
            batch_size: 64,
            participation: 1.0,
            model: ModelConfig::default(),
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            tau: DEFAULT_TAU,
            proto_lambda: DEFAULT_PROTO_LAMBDA,
            gm: GmConfig::default(),
            proto_aggregation: ProtoAggregation::Normalized,
            workers: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gm.validate()?;
        let bad = |msg: String| Err(FedError::InvalidConfig(msg));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.proto_lambda >= 0.0) {
            return bad(format!("proto lambda must be >= 0, got {}", self.proto_lambda));
        }
        SgdState::new(self.learning_rate, self.momentum, self.weight_decay)?;
        Ok(())
    }
}

/// Ascending ids of the `⌈f·K⌉` clients taking part in a round.
pub fn select_clients(clients: usize, fraction: f64, rng: &mut SimRng) -> Vec<usize> {
    let m = ((fraction * clients as f64).ceil() as usize).clamp(1, clients);
    if m == clients {
        (0..clients).collect()
    } else {
        rng.sample_indices(clients, m)
    }
}

/// Everything the server broadcasts besides the model weights.
#[derive(Debug, Clone, Copy)]
pub struct Broadcast<'a> {
    pub hyper: Option<&'a HyperPrototypes>,
    pub averaged: Option<&'a Matrix>,
    pub anchors: Option<&'a GlobalPrototypes>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTotals {
    pub ce: f64,
    pub hpcl: f64,
    pub hpal: f64,
    pub proto: f64,
    pub samples: usize,
}

impl LossTotals {
    fn add(&mut self, other: &LossTotals) {
        self.ce += other.ce;
        self.hpcl += other.hpcl;
        self.hpal += other.hpal;
        self.proto += other.proto;
        self.samples += other.samples;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            v / self.samples as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub samples: usize,
    pub prototypes: LocalPrototypes,
    pub class_gradients: ClassGradients,
    pub losses: LossTotals,
}

/// `E` epochs of minibatch SGD from the global weights, then the client's
/// prototypes and class gradients under the trained weights.
pub fn local_update(
    global: &ModelParams,
    data: &LabeledDataset,
    broadcast: Broadcast<'_>,
    cfg: &FederationConfig,
    rng: &mut SimRng,
) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(FedError::Empty("client dataset"));
    }
    let classes = cfg.model.classes;
    let mut params = global.clone();
    let mut sgd = SgdState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = LossTotals::default();

    for _ in 0..cfg.local_epochs {
        let margin = if cfg.strategy.uses_hpcl() {
            client_margin(&compute_local_prototypes(&params, data)?, classes)
        } else {
            0.0
        };
        let ctx = LossContext {
            strategy: cfg.strategy,
            hyper: broadcast.hyper,
            averaged: broadcast.averaged,
            anchors: broadcast.anchors,
            margin,
            tau: cfg.tau,
            proto_lambda: cfg.proto_lambda,
        };
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut grads = ModelParams::zeros(&cfg.model);
            for &i in batch {
                let (x, y) = (data.x(i), data.y(i));
                let fwd = params.forward(x)?;
                let loss = total_loss(&fwd.z, &fwd.logits, y, &ctx)?;
                params.accumulate_grads(x, &fwd, y, &loss.embedding_grad, weight, &mut grads)?;
                losses.ce += loss.ce;
                losses.hpcl += loss.hpcl;
                losses.hpal += loss.hpal;
                losses.proto += loss.proto;
                losses.samples += 1;
            }
            sgd.step(&mut params, &grads)?;
        }
    }
    if !params.is_finite() {
        return Err(FedError::NonFinite("client weights".into()));
    }
    let (prototypes, class_gradients) = local_summary(&params, data)?;
    Ok(ClientUpdate {
        params,
        samples: data.len(),
        prototypes,
        class_gradients,
        losses,
    })
}

/// Final state of a federation run plus its per-round history.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub records: Vec<RoundRecord>,
    pub params: ModelParams,
    pub hyper: Option<HyperPrototypes>,
    pub global_prototypes: Option<GlobalPrototypes>,
    pub evaluation: Evaluation,
    pub round_seconds: Vec<f64>,
}

fn check_data(clients: &[LabeledDataset], test: &LabeledDataset, cfg: &FederationConfig) -> Result<()> {
    if clients.is_empty() {
        return Err(FedError::Empty("client list"));
    }
    for (k, c) in clients.iter().enumerate() {
        if c.is_empty() {
            return Err(FedError::Partition(format!("client {k} has no samples")));
        }
        if c.classes() != cfg.model.classes || c.in_dim() != cfg.model.in_dim {
            return Err(FedError::shape(
                "client dataset",
                format!("{} classes x {} features", cfg.model.classes, cfg.model.in_dim),
                format!("{} classes x {} features", c.classes(), c.in_dim()),
            ));
        }
    }
    if test.classes() != cfg.model.classes || test.in_dim() != cfg.model.in_dim {
        return Err(FedError::shape("test dataset", cfg.model.in_dim, test.in_dim()));
    }
    Ok(())
}

/// Runs `cfg.rounds` rounds over `clients` and evaluates on `test` after each.
pub fn run_federation(
    clients: &[LabeledDataset],
    test: &LabeledDataset,
    cfg: &FederationConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<FederationOutcome> {
    cfg.validate()?;
    check_data(clients, test, cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| FedError::InvalidConfig(format!("thread pool: {e}")))?;
    let pooled = LabeledDataset::concat(clients)?;
    let strategy = cfg.strategy;
    let m = &cfg.model;

    let mut params = ModelParams::init(m, &mut SimRng::new(cfg.seed, MODEL_INIT_STREAM))?;
    let mut hyper = if strategy.uses_hyperprototypes() {
        let mut rng = SimRng::new(cfg.seed, hyper_init_stream());
        Some(init_hyperprototypes(
            m.classes,
            cfg.gm.bank_size,
            m.embed_dim,
            cfg.gm.init_std,
            &mut rng,
        )?)
    } else {
        None
    };
    let mut global_protos: Option<GlobalPrototypes> = None;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut round_seconds = Vec::with_capacity(cfg.rounds);
    let mut evaluation = None;

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let selected = select_clients(
            clients.len(),
            cfg.participation,
            &mut SimRng::new(cfg.seed, selection_stream(round)),
        );

        let averaged = hyper.as_ref().map(HyperPrototypes::averaged);
        let hp_anchors = match (strategy, &averaged) {
            (Strategy::FedProtoHp, Some(h)) => Some(GlobalPrototypes::from_dense(h.clone())),
            _ => None,
        };
        let broadcast = Broadcast {
            hyper: hyper.as_ref(),
            averaged: averaged.as_ref(),
            anchors: if strategy == Strategy::FedProto {
                global_protos.as_ref()
            } else {
                hp_anchors.as_ref()
            },
        };

        let global = &params;
        let updates: Vec<ClientUpdate> = pool
            .install(|| {
                selected
                    .par_iter()
                    .map(|&k| {
                        let mut rng = SimRng::new(cfg.seed, client_stream(round, k));
                        local_update(global, &clients[k], broadcast, cfg, &mut rng)
                    })
                    .collect::<Vec<Result<ClientUpdate>>>()
            })
            .into_iter()
            .collect::<Result<_>>()?;

        let total: usize = updates.iter().map(|u| u.samples).sum();
        let weights: Vec<f64> = updates.iter().map(|u| u.samples as f64 / total as f64).collect();
        let refs: Vec<&ModelParams> = updates.iter().map(|u| &u.params).collect();
        params = aggregate_params(&refs, &weights)?;

        let locals: Vec<LocalPrototypes> = updates.iter().map(|u| u.prototypes.clone()).collect();
        global_protos = Some(aggregate_global_prototypes(&locals, cfg.proto_aggregation)?);

        let mut gm_loss_start = None;
        let mut gm_loss = None;
        if let Some(s) = hyper.take() {
            let grads: Vec<ClassGradients> = updates.iter().map(|u| u.class_gradients.clone()).collect();
            let target = aggregate_class_gradients(&grads)?;
            let (wc, bc) = params.classifier();
            let (next, trace) = optimize_hyperprototypes(&s, &target, wc, bc, &cfg.gm)?;
            gm_loss_start = trace.initial.mean();
            gm_loss = trace.final_mean;
            debug!(
                "round {round}: matching {:?} -> {:?} ({} steps, {} halvings)",
                gm_loss_start, gm_loss, trace.accepted_steps, trace.halvings
            );
            hyper = Some(next);
        }

        let ev = evaluate(&params, test)?;
        let per_client: Vec<f64> = clients.iter().map(|c| ev.weighted_accuracy(c)).collect();
        let centralized = centralized_prototypes_oracle(&params, &pooled)?;
        let h_bank = hyper.as_ref().map(|s| GlobalPrototypes::from_dense(s.averaged()));
        let dist = prototype_distances(
            global_protos.as_ref().expect("set above"),
            h_bank.as_ref(),
            &centralized,
        );

        let mut losses = LossTotals::default();
        for u in &updates {
            losses.add(&u.losses);
        }
        let record = RoundRecord {
            round,
            participants: selected.len(),
            train_ce: losses.mean(losses.ce),
            train_hpcl: losses.mean(losses.hpcl),
            train_hpal: losses.mean(losses.hpal),
            train_proto: losses.mean(losses.proto),
            gm_loss_start,
            gm_loss,
            test_accuracy: ev.accuracy(),
            domain_accuracy: ev.domain_accuracy(),
            fairness: fairness(&per_client)?,
            proto_l2: dist.global,
            hyper_l2: dist.hyper,
            proto_l2_mean: dist.global_mean,
            hyper_l2_mean: dist.hyper_mean,
        };
        info!(
            "{strategy} seed {} round {round}/{}: acc {:.4} ce {:.4}",
            cfg.seed, cfg.rounds, record.test_accuracy, record.train_ce
        );
        on_round(&record);
        records.push(record);
        evaluation = Some(ev);
        round_seconds.push(started.elapsed().as_secs_f64());
    }

    Ok(FederationOutcome {
        records,
        params,
        hyper,
        global_prototypes: global_protos,
        evaluation: evaluation.expect("at least one round"),
        round_seconds,
    })
}
