use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use scbm::experiment::evaluate;
use scbm::metrics::MetricReport;
use scbm::model::{Checkpoint, PredictConfig};
use scbm::synth::{Dataset, Split};

fn scbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scbm"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn success(args: &[&str]) -> Value {
    let out = scbm(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

/// The single stderr line of a failing call.
fn failure(args: &[&str]) -> (i32, Value) {
    let out = scbm(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: Value = serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {stderr}"));
    (out.status.code().unwrap(), v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, variant: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data.scbm");
    if !data.exists() {
        success(&["generate-data", "--out", s(&data), "--n", "120", "--p", "6", "--c", "4", "--rank", "2", "--seed", "3"]);
    }
    let ckpt = dir.join(format!("{variant}.ckpt"));
    success(&[
        "train", "--data", s(&data), "--variant", variant, "--out", s(&ckpt), "--epochs", "2", "--hidden", "8",
        "--depth", "1", "--mc-samples", "4",
    ]);
    (data, ckpt)
}

#[test]
fn evaluate_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt_path) = train_tiny(dir.path(), "global");
    let preds = dir.path().join("preds.csv");
    let out = success(&[
        "evaluate", "--checkpoint", s(&ckpt_path), "--data", s(&data), "--seed", "9", "--mc-samples", "16",
        "--predictions", s(&preds),
    ]);
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let ds = Dataset::load(&data).unwrap();
    let batch = ds.part(Split::Test).unwrap();
    let pcfg = PredictConfig {
        mc_samples: 16,
        ..PredictConfig::default()
    };
    let (want, lib_preds) = evaluate(&ckpt, &batch, &pcfg, 9).unwrap();
    let got: MetricReport = serde_json::from_value(out["metrics"].clone()).unwrap();
    assert_eq!(got, want);
    assert_eq!(out["checkpoint_hash"], ckpt.hash());
    assert_eq!(out["rows"], batch.len());

    let text = std::fs::read_to_string(&preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("# scbm-csv v1 config={} seed=9", ckpt.hash()));
    assert_eq!(lines.next().unwrap(), "row,p_0,p_1,p_2,p_3,y_0,y_1");
    let first: Vec<f64> = lines.next().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(&first[..4], lib_preds[0].concept_probs.as_slice());
    assert_eq!(&first[4..], lib_preds[0].target_probs.as_slice());
}

#[test]
fn intervene_and_export_corr_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = train_tiny(dir.path(), "global");
    let curve = dir.path().join("curve.csv");
    let out = success(&[
        "intervene", "--checkpoint", s(&ckpt), "--data", s(&data), "--policy", "random", "--mc-samples", "8",
        "--out", s(&curve),
    ]);
    let points = out["points"].as_array().unwrap();
    assert_eq!(points.len(), 5);
    assert_eq!(points[4]["concept_accuracy"], 1.0);
    let text = std::fs::read_to_string(&curve).unwrap();
    assert_eq!(text.lines().nth(1), Some("k,concept_accuracy,target_accuracy"));
    assert_eq!(text.lines().count(), 7);

    let corr = dir.path().join("corr.csv");
    success(&["export-corr", "--checkpoint", s(&ckpt), "--out", s(&corr)]);
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&corr)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[i], 1.0);
        for (j, v) in row.iter().enumerate() {
            assert!((v - rows[j][i]).abs() < 1e-12);
        }
    }
}

#[test]
fn amortized_correlation_needs_an_instance() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = train_tiny(dir.path(), "amortized");
    let (code, err) = failure(&["export-corr", "--checkpoint", s(&ckpt)]);
    assert_eq!(code, 2);
    assert_eq!(err["error"]["kind"], "usage");
    let out = scbm(&["export-corr", "--checkpoint", s(&ckpt), "--data", s(&data), "--row", "0"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| !l.starts_with('#') && !l.starts_with('{')).count(), 4);
    let out = scbm(&["export-corr", "--checkpoint", s(&ckpt), "--instance", "0.1,-0.2,0.3,0,1,-1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failures_print_one_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let (code, err) = failure(&["export-corr", "--checkpoint", s(&missing)]);
    assert_eq!(code, 1);
    assert_eq!(err["error"]["kind"], "io");

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
    let (code, err) = failure(&["export-corr", "--checkpoint", s(&garbage)]);
    assert_eq!(code, 1);
    assert_eq!(err["error"]["kind"], "format");

    let (code, err) = failure(&["train", "--variant", "sideways"]);
    assert_eq!(code, 2);
    assert_eq!(err["error"]["kind"], "usage");

    let (code, err) = failure(&[
        "train", "--data", s(&missing), "--variant", "global", "--out", s(&missing), "--lr=-1",
    ]);
    assert_eq!(code, 1);
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn run_experiment_writes_a_result_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
name = "smoke"
seeds = [0]
variants = ["global", "hard-cbm"]
output = {:?}

[data]
preset = "desk"
n = 120
p = 6
c = 4
rank = 2

[train]
epochs = 1
hidden = 8
depth = 1
mc_samples = 4

[predict]
mc_samples = 8

[[curves]]
policy = "uncertainty"
"#,
            dir.path().join("runs")
        ),
    )
    .unwrap();
    let out = success(&["run-experiment", "--config", s(&cfg)]);
    assert_eq!(out["runs"], 2);
    assert_eq!(out["failed"].as_array().unwrap().len(), 0);
    let run_dir = Path::new(out["dir"].as_str().unwrap());
    for f in ["manifest.json", "seed-0/global/corr.csv", "seed-0/hard-cbm/model.ckpt", "aggregate/global/metrics.csv"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let again = success(&["run-experiment", "--config", s(&cfg)]);
    assert_ne!(again["dir"], out["dir"]);
}
