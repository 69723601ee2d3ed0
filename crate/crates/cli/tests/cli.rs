//! End-to-end checks of the command-line surface: exit codes, artifact
//! locations, and byte-level reproducibility at miniature scale.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn run_in(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should spawn")
}

/// A config small enough that the full pipeline runs in seconds.
const TINY_CONFIG: &str = r#"
seed = 7

[paths]
out_dir = "out"

[data]
train_scenes = 120
val_scenes = 10

[sim]
past_steps = 4
future_steps = 6

[cvae]
hidden = 16
layers = 2

[cvae.train]
epochs = 2
batch_size = 32

[biaser]
epochs_phase1 = 1
epochs_phase2 = 1
batch_size = 32
inner_samples = 4
target_samples_phase1 = 8
target_samples_phase2 = 8

[experiments.forecast]
ref_samples = 32
fde_samples = 8
risk_samples = 4
sigmas = [0.0, 0.95]

[experiments.risk]
sigmas = [0.95]
ks = [1, 2]
ref_samples = 32

[experiments.planning]
n_episodes = 3
sigmas = [0.95]
ks = [1]

[experiments.planning.cem]
n_robot_samples = 15
n_elites = 4
n_iter = 2

[maps]
resolution = 8.0
latent_resolution = 1.5
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("run.toml");
    fs::write(&config, TINY_CONFIG).unwrap();
    (dir, config)
}

#[test]
fn usage_errors_exit_with_code_two() {
    let (dir, config) = setup();

    let out = run_in(dir.path(), &["definitely-not-a-subcommand"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    fs::write(dir.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    let out = run_in(dir.path(), &["--config", "bad.toml", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim_end().lines().count(), 1, "one-line error, got:\n{stderr}");
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert!(stderr.contains("no_such_key"), "{stderr}");

    let out = run_in(dir.path(), &["--config", "run.toml", "--threads", "0", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run_in(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let _ = config;
}

#[test]
fn missing_inputs_exit_with_code_one() {
    let (dir, _config) = setup();

    // No datasets or checkpoints exist yet in this directory.
    for args in [
        ["--config", "run.toml", "train-cvae"],
        ["--config", "run.toml", "eval-forecast"],
        ["--config", "run.toml", "plan"],
    ] {
        let out = run_in(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "args {args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    }

    let out = run_in(dir.path(), &["--config", "missing.toml", "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tiny_pipeline_is_reproducible_and_stays_in_the_output_directory() {
    let (dir, _config) = setup();
    let base = &["--config", "run.toml"][..];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let out = run_in(dir.path(), &args);
        assert!(
            out.status.success(),
            "args {extra:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };

    run(&["gen-data"]);
    run(&["train-cvae"]);
    run(&["train-biaser"]);
    run(&["plan", "--scene", "1", "--k", "2"]);
    run(&["cost-map"]);
    run(&["latent-map"]);
    run(&["--threads", "1", "experiment", "--suite", "all"]);

    let out_dir = dir.path().join("out");
    for name in ["plan.csv", "plan.json", "cost_map.csv", "latent_map.csv", "latent_map.json"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    let reports = out_dir.join("reports");
    let first: Vec<(PathBuf, Vec<u8>)> = [
        "forecast_eval.csv",
        "risk_curves.csv",
        "planning.csv",
        "planning_shifted.csv",
        "manifest.json",
    ]
    .iter()
    .map(|n| {
        let p = reports.join(n);
        let bytes = fs::read(&p).unwrap_or_else(|_| panic!("{n} missing"));
        (p, bytes)
    })
    .collect();
    assert!(fs::read_to_string(reports.join("planning.csv"))
        .unwrap()
        .starts_with("mode,sigma,K,ttc_mean"));

    // Same config and seed on a different thread count: byte-identical.
    run(&["--threads", "3", "experiment", "--suite", "all"]);
    for (path, bytes) in &first {
        assert_eq!(&fs::read(path).unwrap(), bytes, "{} changed", path.display());
    }

    // A different seed changes the data; the config seed restores it exactly.
    let train = out_dir.join("train_scenes.json");
    let original = fs::read(&train).unwrap();
    run(&["--seed", "99", "gen-data"]);
    assert_ne!(fs::read(&train).unwrap(), original);
    run(&["gen-data"]);
    assert_eq!(fs::read(&train).unwrap(), original);

    // Nothing was written outside the configured output directory.
    let mut entries: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, vec!["out", "run.toml"]);
}
