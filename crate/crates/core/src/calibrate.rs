//! Budget-to-noise calibration table for a planned run.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::privacy::{epsilon_for_budget, noise_sigma, sensitivity, total_loss, PrivacySpec, SensitivityParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInput {
    pub eps_bar: f64,
    pub delta: f64,
    pub c0: f64,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub shard_size: usize,
    pub q_max: usize,
    pub rho: f64,
    pub eta0: f64,
    pub grad_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub round: usize,
    pub eta: f64,
    pub sensitivity: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub input: CalibrationInput,
    pub p: f64,
    pub q: f64,
    pub epsilon_round: f64,
    /// Total loss recomputed from `epsilon_round`; equals `eps_bar` up to rounding.
    pub round_trip: f64,
    pub rows: Vec<CalibrationRow>,
}

/// Per-round ε and the σ used at rounds `0`, `T/2` and `T − 1`.
pub fn calibrate(input: &CalibrationInput) -> Result<CalibrationTable> {
    if input.n_clients == 0 || input.clients_per_round == 0 || input.clients_per_round > input.n_clients {
        return Err(FedError::config(format!(
            "need 1 <= K <= N, got K = {}, N = {}",
            input.clients_per_round, input.n_clients
        )));
    }
    if input.rounds == 0 || input.shard_size == 0 {
        return Err(FedError::config("rounds and shard size must be positive"));
    }
    if !(input.eps_bar > 0.0) {
        return Err(FedError::config(format!("budget must be positive, got {}", input.eps_bar)));
    }
    let p = input.clients_per_round as f64 / input.n_clients as f64;
    let q = PrivacySpec::data_fraction(input.q_max, input.batch_size, input.shard_size);
    let mut spec = PrivacySpec::new(input.delta, input.eps_bar, input.c0, p, q)?;
    let epsilon_round = epsilon_for_budget(input.eps_bar, &spec, input.rounds)?;
    spec.epsilon_round = epsilon_round;
    let round_trip = total_loss(epsilon_round, &spec, input.rounds)?;

    let mut rounds = vec![0, input.rounds / 2, input.rounds - 1];
    rounds.dedup();
    let rows = rounds
        .into_iter()
        .map(|t| {
            let eta = input.eta0 / (1.0 + t as f64).sqrt();
            let s = sensitivity(&SensitivityParams {
                rho: input.rho,
                eta,
                q_iters: input.q_max,
                grad_bound: input.grad_bound,
            })?;
            Ok(CalibrationRow {
                round: t,
                eta,
                sensitivity: s,
                sigma: noise_sigma(s, epsilon_round, input.delta)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CalibrationTable {
        input: *input,
        p,
        q,
        epsilon_round,
        round_trip,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> CalibrationInput {
        CalibrationInput {
            eps_bar: 0.5,
            delta: 1e-4,
            c0: 1.0,
            n_clients: 100,
            clients_per_round: 30,
            rounds: 200,
            batch_size: 10,
            shard_size: 325,
            q_max: 10,
            rho: 10.0,
            eta0: 0.01,
            grad_bound: 1.0,
        }
    }

    #[test]
    fn round_trip_matches_budget() {
        for eps_bar in [0.2, 0.5, 1.0, 7.5] {
            let t = calibrate(&CalibrationInput { eps_bar, ..input() }).unwrap();
            assert!(((t.round_trip - eps_bar) / eps_bar).abs() < 1e-9);
            assert_eq!(t.rows.iter().map(|r| r.round).collect::<Vec<_>>(), vec![0, 100, 199]);
        }
    }

    #[test]
    fn larger_budget_means_less_noise() {
        let lo = calibrate(&CalibrationInput { eps_bar: 0.2, ..input() }).unwrap();
        let hi = calibrate(&CalibrationInput { eps_bar: 1.0, ..input() }).unwrap();
        for (a, b) in lo.rows.iter().zip(&hi.rows) {
            assert!(b.sigma < a.sigma);
        }
    }

    #[test]
    fn sigma_ratio_tracks_sensitivity_ratio() {
        // With q held fixed by scaling the shard, only the sensitivity changes.
        let one = calibrate(&CalibrationInput { q_max: 1, shard_size: 65, ..input() }).unwrap();
        let five = calibrate(&CalibrationInput { q_max: 5, shard_size: 325, ..input() }).unwrap();
        assert!((one.q - five.q).abs() < 1e-15);
        for (a, b) in one.rows.iter().zip(&five.rows) {
            let eta = a.eta;
            let r: f64 = 1.0 - 10.0 * eta;
            let series = (1.0 - r.powi(5)) / (1.0 - r);
            assert!((b.sigma / a.sigma - series).abs() < 1e-10 * series);
        }
    }

    #[test]
    fn infeasible_inputs_are_rejected() {
        assert!(calibrate(&CalibrationInput { eps_bar: 0.0, ..input() }).is_err());
        assert!(calibrate(&CalibrationInput { q_max: 50, ..input() }).is_err());
    }
}
