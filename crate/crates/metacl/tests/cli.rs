//! End-to-end checks of the metacl binary on a synthetic config.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metacl"))
}

#[test]
fn run_report_and_export_latents_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let cfg_path = tmp.path().join("run.toml");
    fs::write(
        &cfg_path,
        r#"
dataset = "synthetic"
seeds = [11]
mode = "both"
n_tasks = 2
base_models = 3
hidden = [8]
vae_epochs = 4
vae_hidden = 12
chunk_size = 40
pseudo_models = 2
consolidation_epochs = 1
ensemble = 3
finetune_epochs = 2
buffer = 40
syn_dim = 6
syn_train_per_class = 60
syn_test_per_class = 10
"#,
    )
    .unwrap();

    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_a)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["metrics.csv", "matrix.csv", "run.json", "metrics_aware.csv"] {
        assert!(out_a.join(f).exists(), "{f} missing after run");
    }

    // Same config, another seed; report groups both dirs into one line.
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "12", "--out"])
        .arg(&out_b)
        .status()
        .unwrap();
    assert!(status.success());

    let report_csv = tmp.path().join("report.csv");
    let output = bin()
        .arg("report")
        .arg(&out_a)
        .arg(&out_b)
        .arg("--out")
        .arg(&report_csv)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("(n=2)"), "expected one aggregate over two dirs: {stdout}");
    let csv = fs::read_to_string(&report_csv).unwrap();
    assert_eq!(csv.lines().count(), 2, "header plus one config group");

    let output = bin()
        .args(["export-latents", "--run"])
        .arg(&out_a)
        .args(["--per-task", "5"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let latents = fs::read_to_string(out_a.join("latents.csv")).unwrap();
    assert_eq!(latents.lines().count(), 1 + 2 * 5);

    // Flag contradictions surface as startup errors, not panics.
    let output = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--skip-vae", "--sn-prior"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("mutually exclusive"), "got: {stderr}");
}
