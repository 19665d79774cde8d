use std::path::Path;
use std::process::{Command, Output};

use pgat::config::RunConfig;
use pgat::model::ModelConfig;
use pgat::synth::SceneSpec;

fn pgat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgat"))
        .args(args)
        .env_remove("PGAT_SEED")
        .output()
        .expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    pgat(args).status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.experiment = "cli-test".into();
    cfg.train.epochs = 1;
    cfg.train.lr = 3e-3;
    cfg.train.model = ModelConfig {
        channels: 4,
        ..ModelConfig::with_size(16)
    };
    cfg.study.scene = SceneSpec::with_size(16);
    let p = dir.join("run.json");
    cfg.save(&p).unwrap();
    p
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["train", "--no-such-flag"]), 1);
    assert_eq!(code(&["zeroshot", "--presets", "nope", "--out", "/tmp/unused"]), 1);
    assert_eq!(code(&["ablate", "--axis", "width", "--out", "/tmp/unused"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_config_names_path() {
    let out = pgat(&["train", "--config", "/nonexistent/run.json", "--out", "/tmp/unused-run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn gradcheck_reports_pass() {
    let out = pgat(&["gradcheck", "--trials", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let cfg = tiny_config(dir.path());

    assert_eq!(
        code(&["gen-data", "--out", &d("train"), "--scenes", "3", "--size", "16"]),
        0
    );
    assert_eq!(
        code(&[
            "--seed",
            "9",
            "gen-data",
            "--out",
            &d("eval"),
            "--scenes",
            "2",
            "--size",
            "16"
        ]),
        0
    );
    assert!(dir.path().join("train/manifest.json").exists());

    let out = pgat(&[
        "train",
        "--config",
        &cfg.to_string_lossy(),
        "--data",
        &d("train"),
        "--out",
        &d("run"),
        "--lambda",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "run_config.json",
        "config.json",
        "steps.jsonl",
        "model.ckpt",
        "summary.json",
    ] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
    let saved = RunConfig::load(&dir.path().join("run/run_config.json")).unwrap();
    assert_eq!(saved.train.loss.lambda, 0.5);

    let out = pgat(&[
        "eval",
        "--checkpoint",
        &d("run/model.ckpt"),
        "--data",
        &d("eval"),
        "--by-tier",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    assert!(csv.lines().any(|l| l.starts_with("T1,low,")), "{csv}");

    let out = pgat(&["report", "--runs", &d("run")]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("run,kind,metric,value"));

    // wrong image size for the model is a validation error
    assert_eq!(
        code(&["gen-data", "--out", &d("big"), "--scenes", "1", "--size", "24"]),
        0
    );
    let out = pgat(&[
        "train",
        "--config",
        &cfg.to_string_lossy(),
        "--data",
        &d("big"),
        "--out",
        &d("run2"),
    ]);
    assert_ne!(out.status.code(), Some(0));
}
