//! Parameter-server side: client sampling, aggregation followed by the
//! global proximal step, and downlink sparsification.

use rand::seq::index;
use rand::Rng;

use crate::error::{FedError, Result};
use crate::model::{prox_l1, ModelVector};
use crate::sparsify::{sparse_aggregate, top_k, SparsePayload};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x0: ModelVector,
    pub round: usize,
    pub selected: Vec<usize>,
}

impl ServerState {
    pub fn new(dim: usize) -> Self {
        ServerState {
            x0: ModelVector::zeros(dim),
            round: 0,
            selected: Vec::new(),
        }
    }
}

/// Uniform `K`-subset of `[0, N)`, returned in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(n_total: usize, k_sel: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k_sel == 0 || k_sel > n_total {
        return Err(FedError::config(format!("cannot select K = {k_sel} of N = {n_total} clients")));
    }
    let mut ids = index::sample(rng, n_total, k_sel).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `prox(mean of uploads)`.
pub fn dense_global_update(uploads: &[ModelVector], gamma: f64, rho: f64) -> Result<ModelVector> {
    let Some(first) = uploads.first() else {
        return Err(FedError::invalid("no uploads to aggregate"));
    };
    let d = first.len();
    let mut sum = ModelVector::zeros(d);
    for u in uploads {
        if u.len() != d {
            return Err(FedError::invalid(format!("upload length {} != {d}", u.len())));
        }
        for (s, v) in sum.iter_mut().zip(u.iter()) {
            *s += v;
        }
    }
    // Divide rather than multiply by 1/K so the full-coverage sparse path
    // produces identical bits.
    let k = uploads.len() as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    prox_l1(&sum, gamma, rho)
}

/// `prox(coverage-weighted aggregate of payloads)`.
pub fn sparse_global_update(payloads: &[SparsePayload], gamma: f64, rho: f64) -> Result<ModelVector> {
    let Some(first) = payloads.first() else {
        return Err(FedError::invalid("no payloads to aggregate"));
    };
    prox_l1(&sparse_aggregate(payloads, first.dim())?, gamma, rho)
}

/// Top-`k′` of the global model for broadcast.
pub fn downlink_sparsify(x0: &ModelVector, k_prime: usize) -> Result<SparsePayload> {
    top_k(x0, k_prime)
}
