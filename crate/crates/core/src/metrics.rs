//! Stationarity gap, communication meter, and per-round records.

use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Shard;
use crate::error::{FedError, Result};
use crate::model::{full_gradient, prox_l1, ModelVector, WorkloadParams};

/// Bits per transmitted real number (and per index when indices are metered).
pub const BITS_PER_REAL: u64 = 32;

/// Stationarity gap of the augmented Lagrangian for an arbitrary smooth
/// local loss given by `grad(j, x_j)`.
///
/// Sums, over all clients, `‖∇f_j(x_j) − λ_j + ρ(x_j − x_0)‖² + ‖x_0 − x_j‖²`
/// and adds the prox residual `ρ² ‖x_0 − prox(mean_j(x_j − λ_j/ρ))‖²` for the
/// non-smooth global block.
pub fn stationarity_measure<F>(
    grad: F,
    xs: &[ModelVector],
    x0: &ModelVector,
    lambdas: &[ModelVector],
    gamma: f64,
    rho: f64,
) -> Result<f64>
where
    F: Fn(usize, &ModelVector) -> Result<ModelVector> + Sync,
{
    if xs.is_empty() || xs.len() != lambdas.len() {
        return Err(FedError::invalid("need one dual per primal and at least one client"));
    }
    let d = x0.len();
    if xs.iter().chain(lambdas).any(|v| v.len() != d) {
        return Err(FedError::invalid("all iterates must have the model dimension"));
    }
    let per_client: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|j| -> Result<f64> {
            let g = grad(j, &xs[j])?;
            let mut primal = 0.0;
            for i in 0..d {
                let r = g[i] - lambdas[j][i] + rho * (xs[j][i] - x0[i]);
                primal += r * r;
            }
            Ok(primal + x0.dist_sq(&xs[j]))
        })
        .collect::<Result<_>>()?;
    let client_sum: f64 = per_client.iter().sum();

    let n = xs.len() as f64;
    let mut avg = ModelVector::zeros(d);
    for (x, l) in xs.iter().zip(lambdas) {
        for i in 0..d {
            avg[i] += x[i] - l[i] / rho;
        }
    }
    avg.iter_mut().for_each(|v| *v /= n);
    let target = prox_l1(&avg, gamma, rho)?;
    Ok(client_sum + rho * rho * x0.dist_sq(&target))
}

/// Stationarity gap for the logistic workload with full-batch gradients.
pub fn stationarity_p(
    xs: &[ModelVector],
    x0: &ModelVector,
    lambdas: &[ModelVector],
    shards: &[Arc<Shard>],
    workload: &WorkloadParams,
    rho: f64,
) -> Result<f64> {
    if shards.len() != xs.len() {
        return Err(FedError::invalid("one shard per client required"));
    }
    stationarity_measure(
        |j, x| full_gradient(x, &shards[j].samples, workload),
        xs,
        x0,
        lambdas,
        workload.gamma,
        rho,
    )
}

/// Cumulative uplink/downlink traffic, `32 · k · K` bits per round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommMeter {
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    /// Also charge 32 bits per transmitted index.
    pub with_indices: bool,
}

impl CommMeter {
    pub fn new(with_indices: bool) -> Self {
        CommMeter {
            with_indices,
            ..Default::default()
        }
    }

    fn round_bits(&self, k: usize, clients: usize) -> u64 {
        let per_entry = if self.with_indices { 2 * BITS_PER_REAL } else { BITS_PER_REAL };
        per_entry * k as u64 * clients as u64
    }

    /// Charges one round of `clients` uploads of `k` values each.
    pub fn add_uplink(&mut self, k: usize, clients: usize) -> u64 {
        self.uplink_bits += self.round_bits(k, clients);
        self.uplink_bits
    }

    pub fn add_downlink(&mut self, k_prime: usize, clients: usize) -> u64 {
        self.downlink_bits += self.round_bits(k_prime, clients);
        self.downlink_bits
    }
}

/// Metrics for one evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Rounds completed so far.
    pub round: usize,
    pub test_accuracy: f64,
    pub p_measure: f64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub cumulative_epsilon: Vec<f64>,
    /// `(client, Q)` for this round's participants.
    pub q_used: Vec<(usize, usize)>,
    /// `(client, σ)` for this round's participants.
    pub sigma: Vec<(usize, f64)>,
}

impl RoundRecord {
    pub fn eps_cum_max(&self) -> f64 {
        self.cumulative_epsilon.iter().copied().fold(0.0, f64::max)
    }

    pub fn q_mean(&self) -> f64 {
        if self.q_used.is_empty() {
            return 0.0;
        }
        self.q_used.iter().map(|(_, q)| *q as f64).sum::<f64>() / self.q_used.len() as f64
    }

    pub fn sigma_mean(&self) -> f64 {
        if self.sigma.is_empty() {
            return 0.0;
        }
        self.sigma.iter().map(|(_, s)| *s).sum::<f64>() / self.sigma.len() as f64
    }

    pub fn csv_row(&self) -> CsvRow {
        CsvRow {
            round: self.round,
            accuracy: self.test_accuracy,
            p_measure: self.p_measure,
            uplink_bits: self.uplink_bits,
            downlink_bits: self.downlink_bits,
            eps_cum_max: self.eps_cum_max(),
            q_mean: self.q_mean(),
            sigma_mean: self.sigma_mean(),
        }
    }
}

/// Flat CSV view of a [`RoundRecord`]; field order is the file's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub accuracy: f64,
    pub p_measure: f64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub eps_cum_max: f64,
    pub q_mean: f64,
    pub sigma_mean: f64,
}

pub const CSV_HEADER: &str = "round,accuracy,p_measure,uplink_bits,downlink_bits,eps_cum_max,q_mean,sigma_mean";

/// Appends rows to a metrics CSV, flushing after each so an interrupted
/// run leaves every completed row on disk.
pub struct RecordWriter {
    inner: csv::Writer<File>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let inner = csv::WriterBuilder::new().has_headers(true).from_path(path)?;
        Ok(RecordWriter { inner })
    }

    pub fn write(&mut self, record: &RoundRecord) -> Result<()> {
        self.inner.serialize(record.csv_row())?;
        self.inner.flush()?;
        Ok(())
    }
}
