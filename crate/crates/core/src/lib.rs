//! Federated learning simulator with hyper-prototype gradient matching.
//!
//! The crate is organised bottom-up: [`numerics`] and [`model`] provide the
//! dense math and the MLP, [`data`] builds synthetic federated datasets,
//! [`prototypes`], [`hyperproto`] and [`losses`] implement the client and
//! server signals, and [`federation`] ties them into a round loop whose
//! output is recorded by [`metrics`]. [`experiment`] wraps all of it into the
//! named scenarios driven by the `fedhpro` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod hyperproto;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod prototypes;

pub use error::{FedError, Result};
pub use federation::{run_federation, FederationConfig, FederationOutcome};
pub use losses::Strategy;
pub use model::{ModelConfig, ModelParams};
