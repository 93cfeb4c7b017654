//! Deterministic personalized federated learning simulator.
//!
//! Clients hold a dense MLP split into a feature extractor and a linear
//! classifier. Each round they train the classifier (cross-entropy plus an
//! adversarial prototype/classifier fusion term) and then the extractor
//! (cross-entropy plus a center loss towards global prototypes). The server
//! fuses prototypes with three re-calibrated weight views, aggregates
//! classifiers neuron by neuron, fine-tunes the result on the global
//! prototypes, and only aggregates extractors on a parameter-budget schedule.
//!
//! Module map:
//!
//! - [`nn`]: dense layers, forward passes, analytic gradients, SGD.
//! - [`data`]: Gaussian-mixture data, skew and pathological partitions.
//! - [`losses`]: cross-entropy, center loss, discriminator/generator losses.
//! - [`client`]: the local training round.
//! - [`server`]: weight views, aggregation, fine-tuning, transmission schedule.
//! - [`harness`]: round loop, baselines, evaluation, ledger, config and output.

pub mod client;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod prototype;
pub mod rng;
pub mod selftest;
pub mod server;

pub use error::{Error, Result};
pub use prototype::PrototypeSet;
