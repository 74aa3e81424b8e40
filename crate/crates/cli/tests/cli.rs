use std::path::Path;
use std::process::{Command, Output};

fn cdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdm")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

const TINY: &str = r#"
ablation = ["cdm"]

[sim]
horizon = 5

[sizes]
train = 8
val = 3
test = 3

[model]
embed_dim = 8
num_heads = 2
residual_layers = 1
encoder_cells = 1
ff_dim = 16

[train]
epochs = 1
batch_size = 16

[eval]
model_samples = 4
truth_samples = 6
"#;

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(cdm(&["--help"]).status.code(), Some(0));
    assert_eq!(cdm(&["--version"]).status.code(), Some(0));
    assert_eq!(cdm(&[]).status.code(), Some(1));
    assert_eq!(cdm(&["--gamma", "zero", "show-config"]).status.code(), Some(1));
    assert_eq!(cdm(&["--desk-scale", "--paper-scale", "show-config"]).status.code(), Some(1));
}

#[test]
fn show_config_reflects_flags() {
    let out = cdm(&["--paper-scale", "--gamma", "1,2", "--seed", "7", "show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let v: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(v["gammas"].as_array().unwrap().len(), 2);
    assert_eq!(v["seeds"].as_array().unwrap()[0].as_integer(), Some(7));
    assert_eq!(v["sizes"]["train"].as_integer(), Some(10_000));
    assert_eq!(v["sim"]["horizon"].as_integer(), Some(60));
}

#[test]
fn runtime_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cdm(&["--out", out, "seedvar"]).status.code(), Some(1));
    assert_eq!(cdm(&["--out", out, "report"]).status.code(), Some(1));
    assert_eq!(cdm(&["--config", "/nonexistent.toml", "show-config"]).status.code(), Some(3));
    // Training without simulated cohorts cannot find the dataset.
    assert_eq!(cdm(&["--out", out, "--gamma", "0", "train"]).status.code(), Some(3));
}

#[test]
fn staged_commands_produce_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let base = ["--config", cfg.as_str(), "--out", out.to_str().unwrap(), "--gamma", "0,5"];
    for cmd in ["simulate", "train", "evaluate", "sweep", "report"] {
        let o = cdm(&[&base[..], &[cmd]].concat());
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(out.join("data/gamma5_seed0/manifest.toml").exists());
    assert!(out.join("runs/cdm/gamma0_seed0/checkpoint.cdck").exists());
    let md = std::fs::read_to_string(out.join("sweep/report.md")).unwrap();
    assert!(md.contains("γ = 0") && md.contains("γ = 5"));
    assert!(out.join("sweep/w1.svg").exists());
}
