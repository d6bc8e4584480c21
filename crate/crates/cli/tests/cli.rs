use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedpdm");

/// Small synthetic run that still learns.
const SMALL: &str = r#"
rounds = 10
q_max = 5
grad_bound = 10.0
eval_every = 2
n_clients = 20
clients_per_round = 6
per_client_size = 100

[synthetic]
features = 5
n_samples = 2500
separation = 10.0
spread = 1.0

[privacy]
budget = 1.0
"#;

fn fedpdm(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FEDPDM_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn run_csv(cfg: &str, out: &Path, extra: &[&str]) -> Vec<u8> {
    let o = out.display().to_string();
    let mut args = vec!["run", "-c", cfg, "-o", &o];
    args.extend_from_slice(extra);
    let res = fedpdm(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    fs::read(out.join("metrics.csv")).unwrap()
}

#[test]
fn repeated_run_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = run_csv(&cfg, &dir.path().join("a"), &[]);
    let b = run_csv(&cfg, &dir.path().join("b"), &[]);
    assert_eq!(a, b);
    assert!(dir.path().join("a/summary.json").exists());
    assert!(dir.path().join("a/final_model.json").exists());
}

#[test]
fn full_ratio_bsdp_csv_matches_dense() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let dense = run_csv(&cfg, &dir.path().join("dense"), &["--algorithm", "dp-fedpdm"]);
    let sparse = run_csv(&cfg, &dir.path().join("sparse"), &["--algorithm", "bsdp-fedpdm"]);
    assert_eq!(dense, sparse);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    run_csv(&cfg, &out, &["--rounds", "4", "--no-privacy", "--set", "beta=0.05"]);
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"rounds\": 4"), "{summary}");
    assert!(summary.contains("\"beta\": 0.05"), "{summary}");
    assert!(summary.contains("\"privacy\": null"), "{summary}");
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = dir.path().join("o").display().to_string();
    for extra in [
        vec!["--set", "bogus=1"],
        vec!["--alpha-up", "1.5", "--algorithm", "bsdp-fedpdm"],
        vec!["--alpha-up", "0.5"],
        vec!["--q-max", "60"],
        vec!["--algorithm", "fedavg"],
    ] {
        let mut args = vec!["run", "-c", &cfg, "-o", &o];
        args.extend(extra.iter().copied());
        assert_eq!(fedpdm(&args).status.code(), Some(1), "{extra:?}");
    }
    let broken = dir.path().join("broken.toml");
    fs::write(&broken, "rounds = [").unwrap();
    assert_eq!(fedpdm(&["run", "-c", broken.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(fedpdm(&["calibrate"]).status.code(), Some(1));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o").display().to_string();
    let res = Command::new(BIN)
        .args(["run", "--dataset", "mnist", "-o", &o])
        .env("FEDPDM_DATA_DIR", dir.path().join("nowhere"))
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nowhere"));
}

#[test]
fn calibrate_prints_round_trip() {
    let res = fedpdm(&["calibrate", "--eps-bar", "0.5", "--q-max", "5", "--json"]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let line = text.lines().find(|l| l.contains("\"round_trip\"")).unwrap();
    let v: f64 = line.split(':').nth(1).unwrap().trim().trim_end_matches(',').parse().unwrap();
    assert!((v - 0.5).abs() <= 0.5 * 1e-9);
    assert_eq!(text.matches("\"sigma\"").count(), 3);
}

#[test]
fn sweep_writes_one_csv_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = dir.path().join("grid");
    let res = fedpdm(&[
        "sweep",
        "-c",
        &cfg,
        "--alphas-up",
        "0.2,1",
        "--budgets",
        "0,0.5",
        "-o",
        o.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut cells: Vec<String> = fs::read_dir(&o)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    cells.sort();
    assert_eq!(cells, ["au0.2_ad1_eps0.5", "au0.2_ad1_nodp", "au1_ad1_eps0.5", "au1_ad1_nodp"]);
    for c in &cells {
        assert!(o.join(c).join("metrics.csv").exists());
    }
}

#[test]
fn prep_data_dumps_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let dump = dir.path().join("data");
    let res = fedpdm(&["prep-data", "-c", &cfg, "--dump", dump.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let train = fs::read_to_string(dump.join("train.csv")).unwrap();
    assert_eq!(train.lines().next().unwrap(), "label,f0,f1,f2,f3,f4");
    assert_eq!(train.lines().count(), 1 + 2500);
}
