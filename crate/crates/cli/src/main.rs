use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use fedpdm_core::calibrate::{calibrate, CalibrationInput};
use fedpdm_core::config::{PrivacyConfig, RunConfig};
use fedpdm_core::data::{partition_indices, write_samples_csv, PartitionSpec};
use fedpdm_core::rng::{derive_seed, Purpose};
use fedpdm_core::sim::{load_dataset, resolve_data_dir, run_to_dir, DATA_DIR_ENV};
use fedpdm_core::FedError;
use toml::{Table, Value};

#[derive(Parser)]
#[command(name = "fedpdm", version, about = "Differentially private federated primal-dual simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics.csv, summary.json and final_model.json.
    Run(RunArgs),
    /// Print the per-round ε and noise σ implied by a total budget.
    Calibrate(CalibrateArgs),
    /// Load and partition a dataset, optionally dumping it as CSV.
    PrepData(PrepArgs),
    /// Run a grid over α_U, α_D and ε̄, one output directory per cell.
    Sweep(SweepArgs),
}

/// Config file plus flag overrides shared by every subcommand.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<i64>,
    #[arg(long)]
    seed: Option<i64>,
    #[arg(long)]
    q_max: Option<i64>,
    #[arg(long)]
    grad_bound: Option<f64>,
    #[arg(long)]
    sparsifier: Option<String>,
    #[arg(long)]
    alpha_up: Option<f64>,
    #[arg(long)]
    alpha_down: Option<f64>,
    /// Enable privacy with this total budget ε̄.
    #[arg(long, conflicts_with = "no_privacy")]
    eps_bar: Option<f64>,
    #[arg(long)]
    no_privacy: bool,
    /// Arbitrary override, e.g. `--set beta=0.05` or `--set synthetic.spread=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Print JSON instead of a text table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PrepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Write train.csv and test.csv here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0])]
    alphas_up: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0])]
    alphas_down: Vec<f64>,
    /// Budgets; 0 means privacy off.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0])]
    budgets: Vec<f64>,
    #[arg(short, long, default_value = "sweep")]
    output_dir: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<FedError> for Failure {
    fn from(e: FedError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<FedError>() {
            Some(f) if f.is_config() => Failure::Config(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::PrepData(a) => cmd_prep(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.cfg)?;
    let out_dir = a
        .output_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let data = load_dataset(&cfg).with_context(|| format!("loading {:?} data (data dir {})", cfg.dataset, resolve_data_dir(&cfg).display()))?;
    log::info!(
        "{:?} on {:?}: d = {}, {} rounds -> {}",
        cfg.algorithm,
        cfg.dataset,
        data.classes * data.features,
        cfg.rounds,
        out_dir.display()
    );
    let out = run_to_dir(&cfg, &data, &out_dir)?;
    let s = &out.summary;
    println!(
        "accuracy {:.4}  P {:.4e}  zeros {:.3}  uplink {} bits  downlink {} bits",
        s.final_accuracy, s.final_p_measure, s.final_zero_fraction, s.uplink_bits, s.downlink_bits
    );
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.cfg)?;
    let p = cfg
        .privacy
        .ok_or_else(|| config_err(anyhow!("calibrate needs a privacy budget (--eps-bar or [privacy] in the config)")))?;
    let table = calibrate(&CalibrationInput {
        eps_bar: p.budget,
        delta: p.delta,
        c0: p.c0,
        n_clients: cfg.n_clients,
        clients_per_round: cfg.clients_per_round,
        rounds: cfg.rounds,
        batch_size: cfg.batch_size,
        shard_size: cfg.per_client_size(),
        q_max: cfg.q_max,
        rho: cfg.rho,
        eta0: cfg.eta0(),
        grad_bound: cfg.grad_bound,
    })?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&table).map_err(|e| Failure::Runtime(e.into()))?);
        return Ok(());
    }
    println!("budget      {}", p.budget);
    println!("delta       {}", p.delta);
    println!("p           {}", table.p);
    println!("q           {}", table.q);
    println!("epsilon     {:.12e}", table.epsilon_round);
    println!("round-trip  {:.12e}", table.round_trip);
    println!("{:>6} {:>14} {:>14} {:>14}", "round", "eta", "sensitivity", "sigma");
    for r in &table.rows {
        println!("{:>6} {:>14.6e} {:>14.6e} {:>14.6e}", r.round, r.eta, r.sensitivity, r.sigma);
    }
    Ok(())
}

fn cmd_prep(a: PrepArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.cfg)?;
    let data = load_dataset(&cfg).with_context(|| format!("loading {:?} data (data dir {})", cfg.dataset, resolve_data_dir(&cfg).display()))?;
    let mut counts = vec![0usize; data.classes];
    for s in &data.train {
        counts[s.label] += 1;
    }
    println!(
        "{:?}: {} train, {} test, {} classes, {} features (with bias)",
        cfg.dataset,
        data.train.len(),
        data.test.len(),
        data.classes,
        data.features
    );
    println!("train label counts: {counts:?}");
    let labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    let shards = partition_indices(
        &labels,
        &PartitionSpec {
            scheme: cfg.partition_scheme(),
            n_clients: cfg.n_clients,
            per_client_size: cfg.per_client_size(),
            seed: derive_seed(cfg.seed, Purpose::Partition, &[]),
        },
    )?;
    println!(
        "partition {:?}: {} clients x {} samples",
        cfg.partition_scheme(),
        shards.len(),
        cfg.per_client_size()
    );
    if let Some(dir) = a.dump {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_samples_csv(&data.train, &dir.join("train.csv"))?;
        write_samples_csv(&data.test, &dir.join("test.csv"))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let base = build_config(&a.cfg)?;
    let data = load_dataset(&base).with_context(|| format!("loading {:?} data (data dir {})", base.dataset, resolve_data_dir(&base).display()))?;
    for &au in &a.alphas_up {
        for &ad in &a.alphas_down {
            for &budget in &a.budgets {
                let mut cfg = base.clone();
                cfg.alpha_up = au;
                cfg.alpha_down = ad;
                if au < 1.0 || ad < 1.0 {
                    cfg.algorithm = fedpdm_core::config::Algorithm::BsdpFedpdm;
                }
                cfg.privacy = (budget > 0.0).then(|| PrivacyConfig {
                    budget,
                    ..base.privacy.unwrap_or_default()
                });
                let name = if budget > 0.0 {
                    format!("au{au}_ad{ad}_eps{budget}")
                } else {
                    format!("au{au}_ad{ad}_nodp")
                };
                let out = run_to_dir(&cfg, &data, &a.output_dir.join(&name))?;
                println!("{name}: accuracy {:.4}, uplink {} bits", out.summary.final_accuracy, out.summary.uplink_bits);
            }
        }
    }
    Ok(())
}

/// Layers the config file, then named flags, then `--set` pairs, and validates.
fn build_config(a: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut table = match &a.config {
        Some(path) => read_table(path)?,
        None => Table::new(),
    };
    let mut put = |key: &str, v: Value| set_path(&mut table, key, v);
    if let Some(v) = &a.algorithm {
        put("algorithm", Value::String(v.clone()))?;
    }
    if let Some(v) = &a.dataset {
        put("dataset", Value::String(v.clone()))?;
    }
    if let Some(v) = &a.data_dir {
        put("data_dir", Value::String(v.display().to_string()))?;
    }
    if let Some(v) = a.rounds {
        put("rounds", Value::Integer(v))?;
    }
    if let Some(v) = a.seed {
        put("seed", Value::Integer(v))?;
    }
    if let Some(v) = a.q_max {
        put("q_max", Value::Integer(v))?;
    }
    if let Some(v) = a.grad_bound {
        put("grad_bound", Value::Float(v))?;
    }
    if let Some(v) = &a.sparsifier {
        put("sparsifier", Value::String(v.clone()))?;
    }
    if let Some(v) = a.alpha_up {
        put("alpha_up", Value::Float(v))?;
    }
    if let Some(v) = a.alpha_down {
        put("alpha_down", Value::Float(v))?;
    }
    if let Some(v) = a.eps_bar {
        put("privacy.budget", Value::Float(v))?;
    }
    for pair in &a.sets {
        let (k, raw) = pair
            .split_once('=')
            .ok_or_else(|| config_err(anyhow!("--set expects KEY=VALUE, got {pair:?}")))?;
        put(k.trim(), parse_value(raw.trim()))?;
    }
    if a.no_privacy {
        table.remove("privacy");
    }
    let cfg: RunConfig = Value::Table(table).try_into().map_err(config_err)?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_table(path: &Path) -> Result<Table, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Config)
}

/// Parses a TOML literal; bare words fall back to strings.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, v: Value) -> Result<(), Failure> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), v);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(anyhow!("{part} in {key} is not a table")))?;
    }
    Err(config_err(anyhow!("empty override key")))
}
