//! Client side of a round: adaptive-length local SGD on the augmented
//! Lagrangian, the dual ascent step, and the combined model that gets
//! uploaded (optionally perturbed with Gaussian noise).

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Shard;
use crate::error::{FedError, Result};
use crate::model::{local_gradient, ModelVector, Sample, WorkloadParams};
use crate::rng::{stream, Purpose};

/// Per-client primal/dual pair plus its private data.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub x: ModelVector,
    pub lambda: ModelVector,
    pub shard: Arc<Shard>,
    /// Master seed; mini-batch streams are derived from it per
    /// `(client, round, inner iteration)`.
    pub seed: u64,
}

impl ClientState {
    pub fn new(id: usize, dim: usize, shard: Arc<Shard>, seed: u64) -> Self {
        ClientState {
            id,
            x: ModelVector::zeros(dim),
            lambda: ModelVector::zeros(dim),
            shard,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalRunConfig {
    pub rho: f64,
    /// Step size for this round.
    pub eta: f64,
    /// Stopping tolerance on the squared residual.
    pub nu: f64,
    pub q_max: usize,
    pub batch_size: usize,
}

impl LocalRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.eta > 0.0 && self.nu > 0.0) || self.q_max == 0 || self.batch_size == 0 {
            return Err(FedError::config(format!("local run parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Combined model `x − λ/ρ`, before any noise.
    pub y: ModelVector,
    /// Inner iterations actually performed.
    pub q_used: usize,
    /// Whether the loop stopped at `q_max` rather than on the residual test.
    pub hit_cap: bool,
}

/// Runs one round of local training for `state` starting from the
/// broadcast model `x0`, then applies the primal and dual updates.
pub fn local_round(
    state: &mut ClientState,
    x0: &ModelVector,
    cfg: &LocalRunConfig,
    workload: &WorkloadParams,
    grad_bound: f64,
    round: usize,
) -> Result<LocalUpdate> {
    cfg.validate()?;
    let d = workload.dim();
    if x0.len() != d || state.lambda.len() != d {
        return Err(FedError::invalid(format!("model length {} does not match d = {d}", x0.len())));
    }
    let samples = &state.shard.samples;
    if samples.len() < cfg.batch_size {
        return Err(FedError::config(format!(
            "client {} holds {} samples, fewer than batch size {}",
            state.id,
            samples.len(),
            cfg.batch_size
        )));
    }

    let mut x = x0.clone();
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
    let mut q_used = cfg.q_max;
    let mut hit_cap = true;
    for r in 0..cfg.q_max {
        let mut rng = stream(
            state.seed,
            Purpose::MiniBatch,
            &[state.id as u64, round as u64, r as u64],
        );
        batch.clear();
        batch.extend(
            index::sample(&mut rng, samples.len(), cfg.batch_size)
                .into_iter()
                .map(|i| samples[i].clone()),
        );
        let g = local_gradient(&x, &batch, workload, grad_bound)?;
        // The step direction is exactly the stopping residual at the
        // current iterate with this iteration's batch.
        let mut residual = 0.0;
        for j in 0..d {
            let dir = g[j] - state.lambda[j] + cfg.rho * (x[j] - x0[j]);
            residual += dir * dir;
            x[j] -= cfg.eta * dir;
        }
        if residual <= cfg.nu {
            q_used = r + 1;
            hit_cap = false;
            break;
        }
    }
    if hit_cap {
        log::debug!("client {} hit q_max = {} in round {round}", state.id, cfg.q_max);
    }

    for j in 0..d {
        state.lambda[j] += cfg.rho * (x0[j] - x[j]);
    }
    let y = ModelVector::from_vec(
        x.iter()
            .zip(state.lambda.iter())
            .map(|(xi, li)| xi - li / cfg.rho)
            .collect(),
    );
    state.x = x;
    Ok(LocalUpdate { y, q_used, hit_cap })
}

/// Adds i.i.d. `N(0, σ²)` noise to every entry of `values` in order.
pub fn add_gaussian_noise<R: Rng + ?Sized>(values: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
}

/// Returns `y + ξ` with `ξ ~ N(0, σ² I)`; `σ = 0` returns `y` untouched.
pub fn perturb_upload<R: Rng + ?Sized>(y: &ModelVector, sigma: f64, rng: &mut R) -> Result<ModelVector> {
    if !(sigma >= 0.0) {
        return Err(FedError::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = y.clone();
    add_gaussian_noise(&mut out, sigma, rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::prox_l1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shard(samples: Vec<Sample>) -> Arc<Shard> {
        Arc::new(Shard::new(0, samples))
    }

    fn toy_shard() -> Arc<Shard> {
        shard(vec![
            Sample::new(vec![0.5, 1.0], 0),
            Sample::new(vec![-0.25, 1.0], 1),
            Sample::new(vec![1.0, 1.0], 0),
            Sample::new(vec![-1.0, 1.0], 1),
        ])
    }

    fn cfg(nu: f64, q_max: usize, batch: usize) -> LocalRunConfig {
        LocalRunConfig {
            rho: 10.0,
            eta: 0.01,
            nu,
            q_max,
            batch_size: batch,
        }
    }

    #[test]
    fn infinite_tolerance_stops_after_one_step() {
        let w = WorkloadParams::new(2, 2, 0.5, 0.0).unwrap();
        let mut st = ClientState::new(0, 4, toy_shard(), 5);
        let x0 = ModelVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let out = local_round(&mut st, &x0, &cfg(f64::INFINITY, 50, 2), &w, 1.0, 0).unwrap();
        assert_eq!(out.q_used, 1);
        assert!(!out.hit_cap);

        // Recompute the single SGD step independently from the same batch.
        let mut rng = stream(5, Purpose::MiniBatch, &[0, 0, 0]);
        let batch: Vec<Sample> = index::sample(&mut rng, 4, 2).into_iter().map(|i| st.shard.samples[i].clone()).collect();
        let g = local_gradient(&x0, &batch, &w, 1.0).unwrap();
        let expected: Vec<f64> = x0.iter().zip(g.iter()).map(|(x, g)| x - 0.01 * g).collect();
        assert_eq!(&st.x[..], &expected[..]);
    }

    #[test]
    fn one_step_trace_from_zero() {
        // lambda = 0, rho = 1, x0 = 0: y = x_new - (0 + 1*(0 - x_new)) = 2 x_new
        let w = WorkloadParams::new(1, 1, 0.0, 0.0).unwrap();
        let mut st = ClientState::new(0, 1, shard(vec![Sample::new(vec![1.0], 0)]), 1);
        let c = LocalRunConfig {
            rho: 1.0,
            eta: 0.1,
            nu: f64::INFINITY,
            q_max: 10,
            batch_size: 1,
        };
        let out = local_round(&mut st, &ModelVector::zeros(1), &c, &w, 10.0, 0).unwrap();
        // gradient at 0 is -1/2, so x_new = 0.05
        assert_eq!(st.x[0], 0.05);
        assert_eq!(st.lambda[0], -0.05);
        assert_eq!(out.y[0], 0.1);
        assert_eq!(out.y[0], 2.0 * st.x[0]);
    }

    #[test]
    fn dual_and_combined_identities_hold() {
        let w = WorkloadParams::new(2, 2, 0.5, 0.0).unwrap();
        let mut st = ClientState::new(3, 4, toy_shard(), 9);
        st.lambda = ModelVector::from_vec(vec![0.2, -0.1, 0.05, 0.3]);
        let x0 = ModelVector::from_vec(vec![0.4, 0.1, -0.3, 0.2]);
        let c = cfg(1e-6, 7, 2);
        let lambda_old = st.lambda.clone();
        let out = local_round(&mut st, &x0, &c, &w, 1.0, 4).unwrap();
        assert!(out.q_used <= 7);
        for j in 0..4 {
            assert_eq!(st.lambda[j], lambda_old[j] + c.rho * (x0[j] - st.x[j]));
            assert_eq!(out.y[j], st.x[j] - st.lambda[j] / c.rho);
        }
        assert!(out.hit_cap);
        assert_eq!(out.q_used, 7);
    }

    #[test]
    fn q_used_is_deterministic() {
        let w = WorkloadParams::new(2, 2, 0.5, 0.0).unwrap();
        let x0 = ModelVector::zeros(4);
        let run = |seed| {
            let mut st = ClientState::new(1, 4, toy_shard(), seed);
            let out = local_round(&mut st, &x0, &cfg(0.05, 40, 2), &w, 1.0, 2).unwrap();
            (out.q_used, st.x)
        };
        assert_eq!(run(17), run(17));
    }

    #[test]
    fn shard_smaller_than_batch_is_config_error() {
        let w = WorkloadParams::new(2, 2, 0.0, 0.0).unwrap();
        let mut st = ClientState::new(0, 4, toy_shard(), 0);
        let err = local_round(&mut st, &ModelVector::zeros(4), &cfg(1.0, 5, 10), &w, 1.0, 0).unwrap_err();
        assert!(matches!(err, FedError::Config(_)));
    }

    #[test]
    fn zero_sigma_is_bit_exact() {
        let y = ModelVector::from_vec(vec![-0.0, 1.5, f64::MIN_POSITIVE]);
        let out = perturb_upload(&y, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (a, b) in out.iter().zip(y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(perturb_upload(&y, -1.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let y = ModelVector::zeros(8);
        let a = perturb_upload(&y, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = perturb_upload(&y, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let y = ModelVector::zeros(1);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws: Vec<f64> = (0..100_000).map(|_| perturb_upload(&y, 2.0, &mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let std = var.sqrt();
        assert!((1.98..=2.02).contains(&std), "std {std}");
    }

    /// One client, ν large enough to stop after a single step, no noise and
    /// γ = 0: the new global model is a hand-computable function of the
    /// gradient at zero.
    #[test]
    fn single_client_round_matches_hand_trace() {
        let w = WorkloadParams::new(1, 2, 0.0, 0.0).unwrap();
        let mut st = ClientState::new(0, 2, shard(vec![Sample::new(vec![0.5, 1.0], 0)]), 0);
        let c = LocalRunConfig {
            rho: 10.0,
            eta: 0.04,
            nu: 1e9,
            q_max: 50,
            batch_size: 1,
        };
        let x0 = ModelVector::zeros(2);
        let out = local_round(&mut st, &x0, &c, &w, 1e9, 0).unwrap();
        let x0_next = prox_l1(&out.y, 0.0, c.rho).unwrap();
        // g = -[0.25, 0.5]; x1 = -eta g; lambda = -rho x1; y = x1 + x1 = -2 eta g
        assert_eq!(out.q_used, 1);
        assert!((x0_next[0] - 0.02).abs() < 1e-15);
        assert!((x0_next[1] - 0.04).abs() < 1e-15);
    }
}
