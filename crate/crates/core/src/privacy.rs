//! Gaussian-mechanism calibration and privacy-loss accounting.
//!
//! The released quantity is the combined model `y = x − λ/ρ` produced by
//! `Q` local SGD steps on clipped gradients. Its ℓ2 sensitivity is a
//! geometric series in `|1 − ρη|` and the per-round noise follows the
//! classical Gaussian mechanism bound `σ² = 2 s² ln(1.25/δ) / ε²`. Losses
//! over `T` rounds compose as `ε̄ = c0 q² ε sqrt(p T / (1 − q))`.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Distance from 1 below which `|1 − ρη|` is treated as exactly 1.
pub const GEOMETRIC_DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Per-round ε.
    pub epsilon_round: f64,
    pub delta: f64,
    /// Total budget ε̄ over the run.
    pub total_budget: f64,
    /// Accountant constant; rescales the budget ↔ ε mapping only.
    pub c0: f64,
    /// Client participation fraction `K/N`.
    pub p: f64,
    /// Data fraction `Q b / |D_i|`.
    pub q: f64,
}

impl PrivacySpec {
    /// Builds the spec for a client with the given participation and data
    /// fractions; `epsilon_round` is left at zero until it is derived.
    pub fn new(delta: f64, total_budget: f64, c0: f64, p: f64, q: f64) -> Result<Self> {
        let spec = PrivacySpec {
            epsilon_round: 0.0,
            delta,
            total_budget,
            c0,
            p,
            q,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `q = Q b / |D|`.
    pub fn data_fraction(q_iters: usize, batch: usize, shard_size: usize) -> f64 {
        (q_iters * batch) as f64 / shard_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(FedError::invalid(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(FedError::invalid(format!(
                "data fraction q must lie in (0,1), got {} (reduce q_max or batch size)",
                self.q
            )));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(FedError::invalid(format!("participation p must lie in (0,1], got {}", self.p)));
        }
        if !(self.c0 > 0.0) {
            return Err(FedError::invalid(format!("c0 must be positive, got {}", self.c0)));
        }
        if !(self.total_budget >= 0.0) {
            return Err(FedError::invalid("total budget must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    pub rho: f64,
    pub eta: f64,
    /// Local iteration count `Q`.
    pub q_iters: usize,
    /// Gradient norm bound `G`.
    pub grad_bound: f64,
}

/// ℓ2 sensitivity of the uploaded combined model.
///
/// With `r = |1 − ρη|`, returns `(1 − r^Q)/(1 − r) · 4ηG`, falling back to
/// the limit `4ηQG` when `r` is within [`GEOMETRIC_DEGENERACY_TOL`] of 1
/// (i.e. `ρη ∈ {0, 2}`).
pub fn sensitivity(params: &SensitivityParams) -> Result<f64> {
    let SensitivityParams {
        rho,
        eta,
        q_iters,
        grad_bound,
    } = *params;
    if !(rho > 0.0 && eta > 0.0 && grad_bound > 0.0) || q_iters == 0 {
        return Err(FedError::invalid(format!("sensitivity parameters must be positive: {params:?}")));
    }
    let r = (1.0 - rho * eta).abs();
    let q = q_iters as f64;
    let series = if (1.0 - r).abs() > GEOMETRIC_DEGENERACY_TOL {
        (1.0 - r.powf(q)) / (1.0 - r)
    } else {
        q
    };
    Ok(series * 4.0 * eta * grad_bound)
}

/// Gaussian noise standard deviation for `(ε, δ)`-DP at sensitivity `s`.
pub fn noise_sigma(s: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(FedError::invalid(format!("sensitivity must be >= 0, got {s}")));
    }
    if !(epsilon > 0.0) {
        return Err(FedError::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.25) {
        return Err(FedError::invalid(format!("delta must lie in (0, 1.25), got {delta}")));
    }
    Ok(s * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Total privacy loss after `rounds` rounds at per-round `epsilon_round`.
pub fn total_loss(epsilon_round: f64, spec: &PrivacySpec, rounds: usize) -> Result<f64> {
    if !(spec.q < 1.0) {
        return Err(FedError::invalid(format!("data fraction q must be < 1, got {}", spec.q)));
    }
    if !(spec.q >= 0.0 && spec.p >= 0.0) {
        return Err(FedError::invalid("negative sampling fraction"));
    }
    Ok(spec.c0 * spec.q * spec.q * epsilon_round * (spec.p * rounds as f64 / (1.0 - spec.q)).sqrt())
}

/// Per-round ε that spends exactly `total_budget` over `rounds` rounds.
pub fn epsilon_for_budget(total_budget: f64, spec: &PrivacySpec, rounds: usize) -> Result<f64> {
    if !(total_budget > 0.0) {
        return Err(FedError::invalid(format!("total budget must be positive, got {total_budget}")));
    }
    if !(spec.q > 0.0 && spec.q < 1.0) || !(spec.p > 0.0) || !(spec.c0 > 0.0) || rounds == 0 {
        return Err(FedError::invalid(format!(
            "degenerate privacy spec (q={}, p={}, c0={}, T={rounds})",
            spec.q, spec.p, spec.c0
        )));
    }
    let unit = spec.c0 * spec.q * spec.q * (spec.p * rounds as f64 / (1.0 - spec.q)).sqrt();
    Ok(total_budget / unit)
}

/// Per-client ledger of realized privacy loss.
///
/// Each client's loss after `t` rounds is the composition law evaluated at
/// `t` with the largest local iteration count that client has realized so
/// far. Both inputs only grow, so the ledger is monotone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accountant {
    epsilon_round: f64,
    c0: f64,
    p: f64,
    batch: usize,
    shard_sizes: Vec<usize>,
    max_q: Vec<usize>,
    cumulative: Vec<f64>,
}

impl Accountant {
    pub fn new(epsilon_round: f64, c0: f64, p: f64, batch: usize, shard_sizes: Vec<usize>) -> Self {
        let n = shard_sizes.len();
        Accountant {
            epsilon_round,
            c0,
            p,
            batch,
            shard_sizes,
            max_q: vec![0; n],
            cumulative: vec![0.0; n],
        }
    }

    /// Closes round `rounds_completed` (1-based) with the realized `Q` of
    /// each participating client.
    pub fn record_round(&mut self, rounds_completed: usize, realized: &[(usize, usize)]) -> Result<()> {
        for &(client, q_used) in realized {
            self.max_q[client] = self.max_q[client].max(q_used);
        }
        for client in 0..self.cumulative.len() {
            if self.max_q[client] == 0 {
                continue;
            }
            let spec = PrivacySpec {
                epsilon_round: self.epsilon_round,
                delta: 0.5,
                total_budget: 0.0,
                c0: self.c0,
                p: self.p,
                q: PrivacySpec::data_fraction(self.max_q[client], self.batch, self.shard_sizes[client]),
            };
            let loss = total_loss(self.epsilon_round, &spec, rounds_completed)?;
            self.cumulative[client] = self.cumulative[client].max(loss);
        }
        Ok(())
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn max_cumulative(&self) -> f64 {
        self.cumulative.iter().copied().fold(0.0, f64::max)
    }
}
