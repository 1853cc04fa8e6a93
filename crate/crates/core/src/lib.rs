//! Deterministic single-process federated-learning simulator.
//!
//! Implements FedAvg, SlowMo, FedADC (heavy-ball, Nesterov and double
//! momentum local rules), FedProx, self-confidence distillation for the
//! local loss, non-IID partitioning and classifier-calibration
//! personalization. A run is fully determined by its configuration and seed.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod algorithms;
pub mod data;
pub mod distill;
pub mod engine;
pub mod error;
pub mod nn;
pub mod personalize;
pub mod rng;

pub use error::{Error, Result};
