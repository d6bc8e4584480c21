//! Simulator for differentially private federated primal-dual learning with
//! optional bidirectional model sparsification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod server;
pub mod sim;
pub mod sparsify;

pub use config::RunConfig;
pub use error::{FedError, Result};
pub use model::{ModelVector, Sample, WorkloadParams};
