//! End-to-end runs of the compiled binary: exit codes, output files, and
//! rerun determinism at toy scale.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn softnce(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softnce"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

/// Overrides shrinking the default protocol to seconds.
fn toy_sets() -> Vec<String> {
    [
        "gmm.n_modes=4",
        "gmm.dim=4",
        "data.n_unique=60",
        "data.n_total=300",
        "data.n_test=200",
        "train.max_epochs=10",
        "train.batch_size=50",
        "train.learning_rate=0.05",
        "seeds=[1,2]",
        "sweep.alignment_percents=[0,40]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn with_toy(args: &[&str]) -> Vec<String> {
    let mut full: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    for set in toy_sets() {
        full.push("--set".into());
        full.push(set);
    }
    full
}

fn run_toy(subcommand: &str, extra: &[&str], out: &Path) -> Output {
    let mut args = with_toy(&[subcommand]);
    for e in extra {
        args.push(e.to_string());
    }
    args.push("--output".into());
    args.push(out.to_string_lossy().into_owned());
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    softnce(&arg_refs, out.parent().unwrap())
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"][..], &["estimate", "--help"][..]] {
        let out = softnce(args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}");
    }
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["estimate", "--bogus"],
        vec!["estimate", "--set", "no_such_key=1"],
        vec!["estimate", "--set", "gmm.n_modes=0"],
        vec!["train", "--set", "train.learning_rate=-1"],
        vec!["sweep", "--set", "seeds=[]"],
    ];
    for args in cases {
        let out = softnce(&args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?} should explain itself");
    }
}

#[test]
fn missing_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = softnce(&["estimate", "--config", "nowhere.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_writes_report_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = softnce(
        &[
            "verify",
            "--joints",
            "20",
            "--eps-grid",
            "5",
            "--instances",
            "5",
            "--output",
            out_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
    assert_eq!(report["entropy_units"], "nats");
    assert_eq!(report["suites"].as_array().unwrap().len(), 4);
}

#[test]
fn verify_with_injected_fault_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = softnce(
        &[
            "verify",
            "--joints",
            "5",
            "--eps-grid",
            "3",
            "--instances",
            "3",
            "--inject-fault",
            "--output",
            out_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(false));
}

#[test]
fn grad_check_exit_codes_follow_the_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("grad.json");
    let out = softnce(
        &[
            "grad-check",
            "--instances",
            "5",
            "--step",
            "5e-4",
            "--seed",
            "0",
            "--output",
            report_path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 10);

    // An absurd tolerance turns the same check into an audit failure.
    let out = softnce(
        &["grad-check", "--instances", "5", "--step", "5e-4", "--tolerance", "1e-18"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    let out = softnce(&["grad-check", "--loss", "nonsense"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn estimate_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        fs::create_dir_all(out_dir).unwrap();
        let out = run_toy("estimate", &[], out_dir);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["estimate.csv", "estimate_summary.csv"] {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between reruns");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("estimate.csv.meta.json")).unwrap())
            .unwrap();
    assert!(meta["command"].as_str().unwrap().contains("estimate"));
    assert_eq!(meta["seeds"], serde_json::json!([1, 2]));
    assert_eq!(meta["config"]["gmm"]["n_modes"], serde_json::json!(4));
}

#[test]
fn train_writes_checkpoint_metrics_and_reliability() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    let out = run_toy("train", &["--set", "train.loss_id=\"infonce\""], &out_dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let model = softnce::models::ScoringModel::load(&out_dir.join("model.json")).unwrap();
    assert_eq!(model.n_classes(), 4);
    assert_eq!(model.dim(), 4);

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("train_metrics.json")).unwrap())
            .unwrap();
    for key in ["loss_id", "top1", "top5", "ece", "best_epoch", "epochs_run", "checkpoint"] {
        assert!(metrics.get(key).is_some(), "train_metrics.json missing {key}");
    }
    assert_eq!(metrics["loss_id"], "infonce");

    let reliability = fs::read_to_string(out_dir.join("reliability.csv")).unwrap();
    let lines: Vec<&str> = reliability.lines().collect();
    assert_eq!(lines.len(), 16, "header plus 15 bins");
    assert_eq!(lines[0], "bin_lo,bin_hi,confidence,accuracy,count");
}

#[test]
fn sweep_covers_the_grid_and_respects_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    // The file pins uniform noise; the dedicated flag must win.
    fs::write(
        &config_path,
        r#"{"train": {"noise": "uniform"}, "sweep": {"epsilons": [0.0], "batch_sizes": [25, 50], "losses": ["soft_ce", "st_infonce"]}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    let out = run_toy(
        "sweep",
        &["--config", config_path.to_str().unwrap(), "--noise", "empirical", "--jobs", "2"],
        &out_dir,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let body = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    // 2 alignments x 1 epsilon x 2 batches x 2 losses x 2 seeds x 3 metrics.
    assert_eq!(body.lines().count(), 1 + 48);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("sweep.csv.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["config"]["train"]["noise"], "empirical");
}

#[test]
fn sweep_with_no_axes_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    let mut args = vec![
        "sweep".to_string(),
        "--set".into(),
        "sweep.alignment_percents=[]".into(),
        "--set".into(),
        "sweep.epsilons=[]".into(),
        "--set".into(),
        "sweep.batch_sizes=[]".into(),
        "--set".into(),
        "sweep.losses=[]".into(),
        "--output".into(),
        out_dir.to_string_lossy().into_owned(),
    ];
    args.push("--set".into());
    args.push("data.n_unique=60".into());
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = softnce(&arg_refs, dir.path());
    assert_eq!(out.status.code(), Some(1));
}
