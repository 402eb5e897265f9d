use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use scbm::experiment::{
    correlation, correlation_csv, csv_header, curve_csv, metrics_csv, run_experiment, CurveSpec,
    DataSource, ExperimentConfig, Manifest, Preset, CSV_SCHEMA, MANIFEST_SCHEMA,
};
use scbm::intervention::{CurvePoint, InterventionCurve, PercentileTable, PolicyKind, StrategyConfig};
use scbm::metrics::MetricReport;
use scbm::model::{Checkpoint, Model, PredictConfig, TrainConfig, Variant};

fn small_config(output: &Path, seeds: Vec<u64>, variants: Vec<Variant>) -> ExperimentConfig {
    ExperimentConfig {
        name: "t".into(),
        seeds,
        output: output.to_path_buf(),
        parallel_seeds: false,
        variants,
        data: DataSource {
            preset: Some(Preset::Desk),
            n: Some(250),
            p: Some(8),
            c: Some(4),
            rank: Some(3),
            ..DataSource::default()
        },
        train: TrainConfig {
            epochs: 2,
            mc_samples: 4,
            hidden: 8,
            depth: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        predict: PredictConfig {
            mc_samples: 8,
            ..PredictConfig::default()
        },
        curves: vec![
            CurveSpec {
                policy: PolicyKind::Uncertainty,
                strategy: StrategyConfig::default(),
                max_k: None,
            },
            CurveSpec {
                policy: PolicyKind::Random,
                strategy: StrategyConfig::default(),
                max_k: Some(2),
            },
        ],
    }
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

fn body(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.split_once('\n').unwrap().1.to_string()
}

#[test]
fn single_seed_writes_the_documented_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), vec![0], vec![Variant::Global]);
    let summary = run_experiment(&cfg).unwrap();
    let want: BTreeSet<PathBuf> = [
        "manifest.json",
        "seed-0/global/model.ckpt",
        "seed-0/global/metrics.csv",
        "seed-0/global/curve_uncertainty_confidence-region.csv",
        "seed-0/global/curve_random_confidence-region.csv",
        "seed-0/global/corr.csv",
        "aggregate/global/metrics.csv",
        "aggregate/global/curve_uncertainty_confidence-region.csv",
        "aggregate/global/curve_random_confidence-region.csv",
    ]
    .iter()
    .map(PathBuf::from)
    .collect();
    assert_eq!(files_under(&summary.dir), want);

    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(summary.dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.schema, MANIFEST_SCHEMA);
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.runs.len(), 1);
    assert_eq!(manifest.runs[0].status, "ok");

    let header = csv_header(&cfg.hash(), "0");
    for file in want.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
        let text = std::fs::read_to_string(summary.dir.join(file)).unwrap();
        assert!(text.starts_with(&header), "{}", file.display());
    }

    // One seed: the aggregate mean is that seed's value and the spread is zero.
    let per_seed = body(&summary.dir.join("seed-0/global/metrics.csv"));
    let values: Vec<&str> = per_seed.lines().nth(1).unwrap().split(',').skip(1).collect();
    let agg = body(&summary.dir.join("aggregate/global/metrics.csv"));
    for (line, v) in agg.lines().skip(1).zip(&values) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], *v, "{line}");
        assert_eq!(cols[2], "0.000000");
    }
    let curve = body(&summary.dir.join("seed-0/global/curve_random_confidence-region.csv"));
    let agg_curve = body(&summary.dir.join("aggregate/global/curve_random_confidence-region.csv"));
    assert_eq!(curve.lines().count(), 4);
    for (a, b) in curve.lines().skip(1).zip(agg_curve.lines().skip(1)) {
        let a: Vec<&str> = a.split(',').collect();
        let b: Vec<&str> = b.split(',').collect();
        assert_eq!((a[0], a[1], a[2]), (b[0], b[1], b[3]));
        assert_eq!((b[2], b[4]), ("0.000000", "0.000000"));
    }
}

#[test]
fn parallel_seeds_match_sequential_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), vec![0, 1, 2], vec![Variant::HardCbm, Variant::Amortized]);
    let seq = run_experiment(&cfg).unwrap();
    cfg.parallel_seeds = true;
    let par = run_experiment(&cfg).unwrap();
    let files = files_under(&seq.dir);
    assert_eq!(files, files_under(&par.dir));
    for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
        assert_eq!(body(&seq.dir.join(f)), body(&par.dir.join(f)), "{}", f.display());
    }
    assert_ne!(seq.dir, par.dir);
}

#[test]
fn failed_stages_are_recorded_and_other_runs_continue() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), vec![0, 1], vec![Variant::Amortized, Variant::HardCbm]);
    // Large steps on the unbounded signed penalty drive the amortized loss to infinity.
    cfg.train.lr = 5.0;
    cfg.train.epochs = 20;
    cfg.train.lambda2 = Some(10.0);
    let summary = run_experiment(&cfg).unwrap();
    let runs = &summary.manifest.runs;
    assert_eq!(runs.len(), 4);
    let failed: Vec<_> = runs.iter().filter(|r| r.status != "ok").collect();
    assert!(!failed.is_empty());
    for r in &failed {
        assert_eq!(r.variant, Variant::Amortized);
        assert!(["train", "evaluate", "intervene", "correlation"].contains(&r.status.as_str()));
        assert!(!r.error.as_ref().unwrap().message.is_empty());
    }
    assert!(runs.iter().filter(|r| r.variant == Variant::HardCbm).all(|r| r.status == "ok"));
}

fn checkpoint_with_factor(l: &DMatrix<f64>) -> Checkpoint {
    let c = l.nrows();
    let cfg = TrainConfig {
        hidden: 4,
        depth: 1,
        ..TrainConfig::default()
    };
    let mut model = Model::new(Variant::Global, 3, c, &cfg).unwrap();
    model.set_global_cholesky(l).unwrap();
    Checkpoint {
        model,
        config: cfg,
        percentiles: PercentileTable {
            low: vec![0.0; c],
            high: vec![0.0; c],
        },
        history: Vec::new(),
        best_epoch: 0,
    }
}

#[test]
fn correlation_examples() {
    let diag = checkpoint_with_factor(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 2.0, 1.3])));
    let corr = correlation(&diag, None).unwrap();
    assert!((corr - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);

    let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 4.0]);
    let l = sigma.cholesky().unwrap().l();
    let corr = correlation(&checkpoint_with_factor(&l), None).unwrap();
    assert!((corr[(0, 1)] - 0.5).abs() < 1e-9 && (corr[(1, 0)] - 0.5).abs() < 1e-9);
    assert_eq!((corr[(0, 0)], corr[(1, 1)]), (1.0, 1.0));

    let cfg = TrainConfig {
        hidden: 4,
        depth: 1,
        ..TrainConfig::default()
    };
    let amortized = Checkpoint {
        model: Model::new(Variant::Amortized, 3, 5, &cfg).unwrap(),
        config: cfg,
        percentiles: PercentileTable {
            low: vec![0.0; 5],
            high: vec![0.0; 5],
        },
        history: Vec::new(),
        best_epoch: 0,
    };
    assert!(correlation(&amortized, None).is_err());
    let corr = correlation(&amortized, Some(&[0.3, -1.0, 2.0])).unwrap();
    for i in 0..5 {
        assert_eq!(corr[(i, i)], 1.0);
        for j in 0..5 {
            assert!((corr[(i, j)] - corr[(j, i)]).abs() < 1e-12);
        }
    }
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn csv_layouts_match_golden_files() {
    let header = csv_header("abc123", "7");
    assert_eq!(header, format!("# {CSV_SCHEMA} config=abc123 seed=7\n"));
    let report = MetricReport {
        target_accuracy: 0.75,
        concept_accuracy: 0.8125,
        jaccard: 2.0 / 3.0,
        brier: 0.2425,
        ece: 0.1,
    };
    assert_eq!(metrics_csv(&header, &[(Variant::Global, report)]), golden("metrics.csv"));
    let curve = InterventionCurve {
        points: vec![
            CurvePoint {
                k: 0,
                concept_accuracy: 0.5,
                target_accuracy: 0.625,
            },
            CurvePoint {
                k: 1,
                concept_accuracy: 0.75,
                target_accuracy: 0.7,
            },
        ],
        clipped: false,
        unconverged: 0,
    };
    assert_eq!(curve_csv(&header, &curve), golden("curve.csv"));
    let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    assert_eq!(correlation_csv(&header, &corr), golden("corr.csv"));
}
