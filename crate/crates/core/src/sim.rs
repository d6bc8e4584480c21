//! End-to-end driver for both algorithms.
//!
//! Each round: sample clients, broadcast (sparsified for BSDP), run local
//! rounds in parallel, perturb, sparsify the uploads (BSDP), aggregate and
//! apply the proximal step, then meter and account. All randomness comes
//! from per-purpose streams keyed by round and client id, so the worker
//! count never changes the output.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{add_gaussian_noise, local_round, perturb_upload, ClientState, LocalRunConfig};
use crate::config::{Algorithm, DatasetKind, RunConfig, SparsifierKind};
use crate::data::{
    load_adult, load_mnist, partition, synth_generate, AdultOptions, Dataset, PartitionSpec, Shard, SynthSpec,
};
use crate::error::{FedError, Result};
use crate::metrics::{stationarity_p, CommMeter, RecordWriter, RoundRecord};
use crate::model::{predict_accuracy, ModelVector, WorkloadParams};
use crate::privacy::{epsilon_for_budget, noise_sigma, sensitivity, Accountant, PrivacySpec, SensitivityParams};
use crate::rng::{stream, Purpose};
use crate::server::{dense_global_update, downlink_sparsify, sample_clients, sparse_global_update, ServerState};
use crate::sparsify::{densify, rand_k, top_k, SparsePayload};

/// Environment variable overriding `data_dir`.
pub const DATA_DIR_ENV: &str = "FEDPDM_DATA_DIR";

pub fn resolve_data_dir(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| cfg.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synthetic => synth_generate(&SynthSpec {
            classes: cfg.synthetic.classes,
            features: cfg.synthetic.features,
            n_samples: cfg.synthetic.n_samples,
            separation: cfg.synthetic.separation,
            spread: cfg.synthetic.spread,
            seed: cfg.synthetic.seed,
        }),
        DatasetKind::Mnist => load_mnist(&resolve_data_dir(cfg).join("mnist")),
        DatasetKind::Adult => {
            let opts = AdultOptions {
                drop_missing: cfg.adult_drop_missing,
            };
            Ok(load_adult(&resolve_data_dir(cfg).join("adult"), opts)?.dataset)
        }
    }
}

enum Upload {
    Dense(ModelVector),
    Sparse(SparsePayload),
}

/// Deterministic run summary; contains no timing information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub dim: usize,
    pub classes: usize,
    pub features: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub rounds_completed: usize,
    pub final_accuracy: f64,
    pub final_p_measure: f64,
    pub final_zero_fraction: f64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    /// Per-round ε used for calibration; absent without privacy.
    pub epsilon_round: Option<f64>,
    pub eps_cum_max: f64,
    pub cap_hits: usize,
    pub local_iterations: usize,
    /// First round after which every client had been selected at least once.
    pub full_coverage_round: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_model: ModelVector,
    pub summary: RunSummary,
}

/// State of a simulation in progress.
#[derive(Debug)]
pub struct Simulation {
    cfg: RunConfig,
    workload: WorkloadParams,
    clients: Vec<ClientState>,
    shards: Vec<Arc<Shard>>,
    test: Vec<crate::model::Sample>,
    server: ServerState,
    meter: CommMeter,
    accountant: Option<Accountant>,
    /// Per-client ε; empty without privacy.
    eps_client: Vec<f64>,
    seen: Vec<bool>,
    full_coverage_round: Option<usize>,
    cap_hits: usize,
    local_iterations: usize,
    train_samples: usize,
}

impl Simulation {
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let workload = WorkloadParams::new(data.classes, data.features, cfg.beta, cfg.gamma)?;
        let spec = PartitionSpec {
            scheme: cfg.partition_scheme(),
            n_clients: cfg.n_clients,
            per_client_size: cfg.per_client_size(),
            seed: crate::rng::derive_seed(cfg.seed, Purpose::Partition, &[]),
        };
        let shards: Vec<Arc<Shard>> = partition(&data.train, &spec)?.into_iter().map(Arc::new).collect();
        let d = workload.dim();
        let clients = shards
            .iter()
            .enumerate()
            .map(|(i, s)| ClientState::new(i, d, Arc::clone(s), cfg.seed))
            .collect();

        let (accountant, eps_client) = match &cfg.privacy {
            None => (None, Vec::new()),
            Some(p) => {
                let part = cfg.clients_per_round as f64 / cfg.n_clients as f64;
                let eps = shards
                    .iter()
                    .map(|s| {
                        let q = PrivacySpec::data_fraction(cfg.q_max, cfg.batch_size, s.len());
                        let spec = PrivacySpec::new(p.delta, p.budget, p.c0, part, q)?;
                        epsilon_for_budget(p.budget, &spec, cfg.rounds)
                    })
                    .collect::<Result<Vec<f64>>>()
                    .map_err(|e| FedError::config(format!("privacy budget cannot be calibrated: {e}")))?;
                // All shards share one size in every built-in partition, so one ε fits all.
                let acc = Accountant::new(
                    eps[0],
                    p.c0,
                    part,
                    cfg.batch_size,
                    shards.iter().map(|s| s.len()).collect(),
                );
                (Some(acc), eps)
            }
        };
        Ok(Simulation {
            cfg: cfg.clone(),
            workload,
            clients,
            shards,
            test: data.test.clone(),
            server: ServerState::new(d),
            meter: CommMeter::new(cfg.meter_indices),
            accountant,
            eps_client,
            seen: vec![false; cfg.n_clients],
            full_coverage_round: None,
            cap_hits: 0,
            local_iterations: 0,
            train_samples: data.train.len(),
        })
    }

    pub fn global_model(&self) -> &ModelVector {
        &self.server.x0
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    fn sigma_for(&self, client: usize, t: usize) -> Result<f64> {
        let Some(p) = &self.cfg.privacy else {
            return Ok(0.0);
        };
        let s = sensitivity(&SensitivityParams {
            rho: self.cfg.rho,
            eta: self.cfg.eta(t),
            q_iters: self.cfg.q_max,
            grad_bound: self.cfg.grad_bound,
        })?;
        noise_sigma(s, self.eps_client[client], p.delta)
    }

    /// Runs round `t` (0-based) and returns `(client, Q)` and `(client, σ)` per participant.
    #[allow(clippy::type_complexity)]
    pub fn step(&mut self) -> Result<(Vec<(usize, usize)>, Vec<(usize, f64)>)> {
        let t = self.server.round;
        let cfg = &self.cfg;
        let d = self.workload.dim();
        let bsdp = cfg.algorithm == Algorithm::BsdpFedpdm;
        let selected = sample_clients(cfg.n_clients, cfg.clients_per_round, &mut stream(cfg.seed, Purpose::ClientSampling, &[t as u64]))?;
        for &i in &selected {
            self.seen[i] = true;
        }
        if self.full_coverage_round.is_none() && self.seen.iter().all(|&s| s) {
            self.full_coverage_round = Some(t + 1);
            log::info!("every client has participated after {} rounds", t + 1);
        }

        let (broadcast, k_down) = if bsdp {
            let k = cfg.k_down(d);
            (densify(&downlink_sparsify(&self.server.x0, k)?)?, k)
        } else {
            (self.server.x0.clone(), d)
        };
        let k_up = if bsdp { cfg.k_up(d) } else { d };
        let local = LocalRunConfig {
            rho: cfg.rho,
            eta: cfg.eta(t),
            nu: cfg.nu,
            q_max: cfg.q_max,
            batch_size: cfg.batch_size,
        };
        let sigmas = selected
            .iter()
            .map(|&i| Ok((i, self.sigma_for(i, t)?)))
            .collect::<Result<Vec<_>>>()?;

        let mut mask = vec![false; cfg.n_clients];
        for &i in &selected {
            mask[i] = true;
        }
        let workload = self.workload;
        let participants: Vec<&mut ClientState> = self.clients.iter_mut().filter(|c| mask[c.id]).collect();
        let results: Vec<(Upload, usize, bool)> = participants
            .into_par_iter()
            .zip(sigmas.par_iter())
            .map(|(client, &(_, sigma))| -> Result<(Upload, usize, bool)> {
                let id = client.id as u64;
                let upd = local_round(client, &broadcast, &local, &workload, cfg.grad_bound, t)?;
                let mut noise = stream(cfg.seed, Purpose::DpNoise, &[id, t as u64]);
                let upload = if bsdp {
                    let mut payload = match cfg.sparsifier {
                        SparsifierKind::Top => top_k(&upd.y, k_up)?,
                        SparsifierKind::Rand => rand_k(&upd.y, k_up, &mut stream(cfg.seed, Purpose::RandK, &[id, t as u64]))?,
                    };
                    add_gaussian_noise(payload.values_mut(), sigma, &mut noise);
                    Upload::Sparse(payload)
                } else {
                    Upload::Dense(perturb_upload(&upd.y, sigma, &mut noise)?)
                };
                Ok((upload, upd.q_used, upd.hit_cap))
            })
            .collect::<Result<_>>()?;

        let q_used: Vec<(usize, usize)> = selected.iter().zip(&results).map(|(&i, r)| (i, r.1)).collect();
        self.cap_hits += results.iter().filter(|r| r.2).count();
        self.local_iterations += results.iter().map(|r| r.1).sum::<usize>();
        self.server.x0 = if bsdp {
            let payloads: Vec<SparsePayload> = results
                .into_iter()
                .map(|(u, _, _)| match u {
                    Upload::Sparse(p) => p,
                    Upload::Dense(_) => unreachable!("bsdp uploads are sparse"),
                })
                .collect();
            sparse_global_update(&payloads, cfg.gamma, cfg.rho)?
        } else {
            let uploads: Vec<ModelVector> = results
                .into_iter()
                .map(|(u, _, _)| match u {
                    Upload::Dense(v) => v,
                    Upload::Sparse(_) => unreachable!("dense uploads are dense"),
                })
                .collect();
            dense_global_update(&uploads, cfg.gamma, cfg.rho)?
        };
        if !self.server.x0.is_finite() {
            return Err(FedError::invalid(format!("global model diverged in round {t}")));
        }
        self.meter.add_downlink(k_down, selected.len());
        self.meter.add_uplink(k_up, selected.len());
        if let Some(acc) = &mut self.accountant {
            acc.record_round(t + 1, &q_used)?;
        }
        self.server.selected = selected;
        self.server.round = t + 1;
        Ok((q_used, sigmas))
    }

    pub fn p_measure(&self) -> Result<f64> {
        let xs: Vec<ModelVector> = self.clients.iter().map(|c| c.x.clone()).collect();
        let lambdas: Vec<ModelVector> = self.clients.iter().map(|c| c.lambda.clone()).collect();
        stationarity_p(&xs, &self.server.x0, &lambdas, &self.shards, &self.workload, self.cfg.rho)
    }

    pub fn record(&self, q_used: Vec<(usize, usize)>, sigma: Vec<(usize, f64)>) -> Result<RoundRecord> {
        Ok(RoundRecord {
            round: self.server.round,
            test_accuracy: predict_accuracy(&self.server.x0, &self.test)?,
            p_measure: self.p_measure()?,
            uplink_bits: self.meter.uplink_bits,
            downlink_bits: self.meter.downlink_bits,
            cumulative_epsilon: self.accountant.as_ref().map(|a| a.cumulative().to_vec()).unwrap_or_default(),
            q_used,
            sigma,
        })
    }

    pub fn meter(&self) -> &CommMeter {
        &self.meter
    }

    fn summary(&self, last: Option<&RoundRecord>) -> RunSummary {
        let x0 = &self.server.x0;
        RunSummary {
            config: self.cfg.clone(),
            dim: x0.len(),
            classes: self.workload.classes,
            features: self.workload.features,
            train_samples: self.train_samples,
            test_samples: self.test.len(),
            rounds_completed: self.server.round,
            final_accuracy: last.map_or(f64::NAN, |r| r.test_accuracy),
            final_p_measure: last.map_or(f64::NAN, |r| r.p_measure),
            final_zero_fraction: x0.count_zeros() as f64 / x0.len() as f64,
            uplink_bits: self.meter.uplink_bits,
            downlink_bits: self.meter.downlink_bits,
            epsilon_round: self.eps_client.first().copied(),
            eps_cum_max: self.accountant.as_ref().map_or(0.0, Accountant::max_cumulative),
            cap_hits: self.cap_hits,
            local_iterations: self.local_iterations,
            full_coverage_round: self.full_coverage_round,
        }
    }
}

/// Runs all rounds, handing each evaluated record to `sink` as soon as it exists.
pub fn run_with_sink(
    cfg: &RunConfig,
    data: &Dataset,
    mut sink: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg, data)?;
    let mut records = Vec::new();
    for t in 0..cfg.rounds {
        let (q_used, sigma) = sim.step()?;
        let done = t + 1;
        let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.rounds;
        if due {
            let rec = sim.record(q_used, sigma)?;
            log::debug!("round {done}: accuracy {:.4}, P {:.4e}", rec.test_accuracy, rec.p_measure);
            sink(&rec)?;
            records.push(rec);
        }
    }
    let summary = sim.summary(records.last());
    Ok(RunOutput {
        records,
        final_model: sim.server.x0,
        summary,
    })
}

pub fn run_in_memory(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput> {
    run_with_sink(cfg, data, |_| Ok(()))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "final_model.json";

/// Runs and writes `metrics.csv`, `summary.json` and `final_model.json` to `out_dir`.
/// The CSV is flushed after every row, so an interrupted run leaves a valid prefix.
pub fn run_to_dir(cfg: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out_dir)?;
    let mut writer = RecordWriter::create(&out_dir.join(METRICS_FILE))?;
    let out = run_with_sink(cfg, data, |r| writer.write(r))?;
    fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&out.summary)?)?;
    fs::write(out_dir.join(MODEL_FILE), serde_json::to_string(&out.final_model)?)?;
    Ok(out)
}
