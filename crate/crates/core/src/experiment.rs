//! Multi-seed experiments and result export.
//!
//! A run writes into a fresh directory `<output>/<name>-<UTC timestamp>`:
//!
//! ```text
//! manifest.json
//! seed-<s>/<variant>/model.ckpt
//! seed-<s>/<variant>/metrics.csv
//! seed-<s>/<variant>/curve_<policy>_<strategy>.csv
//! seed-<s>/<variant>/corr.csv
//! aggregate/<variant>/metrics.csv
//! aggregate/<variant>/curve_<policy>_<strategy>.csv
//! ```
//!
//! Every CSV starts with `# scbm-csv v1 config=<hash> seed=<seed>`; the
//! aggregate files list all contributing seeds. Nothing in the directory
//! depends on wall-clock time except its name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::format::{sha256_hex, write_atomic};
use crate::gauss::correlation_from_covariance;
use crate::intervention::{run_intervention_curve, InterventionCurve, PolicyKind, StrategyConfig};
use crate::metrics::{report, MetricReport};
use crate::model::{train, Checkpoint, PredictConfig, Prediction, TrainConfig, Variant, HARD_SCALE};
use crate::synth::{generate_split, split, Batch, Dataset, Split, SynthConfig};
use crate::tensor::Tensor;

pub const CSV_SCHEMA: &str = "scbm-csv v1";
pub const MANIFEST_SCHEMA: &str = "scbm-run v1";
/// Environment variables `SCBM_<KEY>` override top-level config keys.
pub const ENV_PREFIX: &str = "SCBM_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    Desk,
}

/// Either a synthetic preset (optionally resized) or a dataset file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub preset: Option<Preset>,
    pub path: Option<PathBuf>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub c: Option<usize>,
    pub rank: Option<usize>,
}

impl DataSource {
    fn validate(&self) -> Result<()> {
        match (&self.preset, &self.path) {
            (Some(_), None) => Ok(()),
            (None, Some(path)) => {
                if [self.n, self.p, self.c, self.rank].iter().any(Option::is_some) {
                    return Err(Error::Config(
                        "data.n/p/c/rank only apply to synthetic presets".into(),
                    ));
                }
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "dataset file {} does not exist",
                        path.display()
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Config(
                "data needs exactly one of `preset` or `path`".into(),
            )),
        }
    }

    pub fn synth_config(&self, seed: u64) -> Option<SynthConfig> {
        let mut cfg = match self.preset? {
            Preset::Full => SynthConfig::full(seed),
            Preset::Desk => SynthConfig::desk(seed),
        };
        cfg.n = self.n.unwrap_or(cfg.n);
        cfg.p = self.p.unwrap_or(cfg.p);
        cfg.c = self.c.unwrap_or(cfg.c);
        cfg.rank = self.rank.unwrap_or(cfg.rank);
        Some(cfg)
    }

    /// Synthetic data is regenerated per seed; a file is split with the seed
    /// only when it carries no split of its own.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        if let Some(cfg) = self.synth_config(seed) {
            return generate_split(&cfg);
        }
        let path = self.path.as_ref().expect("validated data source");
        let ds = Dataset::load(path)?;
        Ok(if ds.split.is_some() { ds } else { split(ds, seed) })
    }
}

/// One intervention curve to compute for every trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub policy: PolicyKind,
    #[serde(default)]
    pub strategy: StrategyConfig,
    /// Defaults to the number of concepts.
    pub max_k: Option<usize>,
}

impl CurveSpec {
    pub fn file_stem(&self) -> String {
        format!("curve_{}_{}", self.policy.name(), self.strategy.kind.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Runs seeds concurrently; results are identical either way.
    #[serde(default)]
    pub parallel_seeds: bool,
    pub variants: Vec<Variant>,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub curves: Vec<CurveSpec>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Parses TOML, then applies `SCBM_<KEY>` overrides from `env`.
    ///
    /// An override value is read as a TOML value when it parses as one
    /// (`SCBM_SEEDS="[0, 1]"`, `SCBM_PARALLEL_SEEDS=true`) and as a plain
    /// string otherwise (`SCBM_OUTPUT=/tmp/runs`).
    pub fn from_toml_str<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid experiment config: {e}")))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| Some((k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase(), v)))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{ENV_PREFIX}{} does not name a top-level config key",
                    key.to_ascii_uppercase()
                )));
            }
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw));
            table.insert(key, value);
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variant list is empty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run name {:?}", self.name)));
        }
        self.data.validate()?;
        self.train.validate()?;
        for curve in &self.curves {
            curve.strategy.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

const TOP_LEVEL_KEYS: [&str; 5] = ["name", "seeds", "output", "parallel_seeds", "variants"];

/// Outcome of one (seed, variant) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub variant: Variant,
    /// `ok`, or the stage that failed.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
    pub files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    /// Region-solver cap hits per curve file.
    pub unconverged: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunEntry>,
    pub aggregate: Vec<String>,
}

/// In-memory results of a successful (seed, variant) pair.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub variant: Variant,
    pub metrics: MetricReport,
    pub curves: Vec<(CurveSpec, InterventionCurve)>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub results: Vec<SeedResult>,
}

impl RunSummary {
    /// Per-k mean target accuracy of one curve across seeds.
    pub fn mean_target_curve(&self, variant: Variant, spec: &CurveSpec) -> Option<Vec<f64>> {
        self.mean_curve(variant, spec, |p| p.target_accuracy)
    }

    pub fn mean_concept_curve(&self, variant: Variant, spec: &CurveSpec) -> Option<Vec<f64>> {
        self.mean_curve(variant, spec, |p| p.concept_accuracy)
    }

    fn mean_curve(
        &self,
        variant: Variant,
        spec: &CurveSpec,
        field: impl Fn(&crate::intervention::CurvePoint) -> f64,
    ) -> Option<Vec<f64>> {
        let curves: Vec<&InterventionCurve> = self
            .results
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.curves.iter().find(|(s, _)| s == spec).map(|(_, c)| c))
            .collect();
        let first = curves.first()?;
        Some(
            (0..first.points.len())
                .map(|k| mean_std(&curves.iter().map(|c| field(&c.points[k])).collect::<Vec<_>>()).0)
                .collect(),
        )
    }
}

/// Trains, evaluates and runs intervention curves for every seed and variant.
///
/// A failing stage is recorded in the manifest and the remaining pairs
/// still run. Only configuration and output-directory problems are errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = fresh_run_dir(&cfg.output, &cfg.name)?;
    let hash = cfg.hash();
    info!(dir = %dir.display(), config = %hash, "experiment started");

    let per_seed = |&seed: &u64| run_seed(cfg, &hash, &dir, seed);
    let outcomes: Vec<Vec<(RunEntry, Option<SeedResult>)>> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(per_seed).collect()
    } else {
        cfg.seeds.iter().map(per_seed).collect()
    };
    let mut runs = Vec::new();
    let mut results = Vec::new();
    for (entry, result) in outcomes.into_iter().flatten() {
        runs.push(entry);
        results.extend(result);
    }

    let aggregate = write_aggregates(cfg, &hash, &dir, &results)?;
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        name: cfg.name.clone(),
        config_hash: hash,
        config: cfg.clone(),
        runs,
        aggregate,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &json)?;
    info!(dir = %dir.display(), "experiment finished");
    Ok(RunSummary {
        dir,
        manifest,
        results,
    })
}

fn fresh_run_dir(output: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(output)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{name}-{stamp}");
    for attempt in 0.. {
        let candidate = if attempt == 0 {
            output.join(&base)
        } else {
            output.join(format!("{base}-{attempt}"))
        };
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded attempts")
}

fn run_seed(
    cfg: &ExperimentConfig,
    hash: &str,
    dir: &Path,
    seed: u64,
) -> Vec<(RunEntry, Option<SeedResult>)> {
    let data = cfg.data.load(seed);
    cfg.variants
        .iter()
        .map(|&variant| {
            let mut entry = RunEntry {
                seed,
                variant,
                status: "ok".into(),
                error: None,
                files: Vec::new(),
                checkpoint_hash: None,
                best_epoch: None,
                unconverged: BTreeMap::new(),
            };
            let outcome = match &data {
                Ok(ds) => run_variant(cfg, hash, dir, seed, variant, ds, &mut entry)
                    .map_err(|(stage, e)| (stage, ErrorRecord::from(&e))),
                Err(e) => Err(("data", ErrorRecord::from(e))),
            };
            match outcome {
                Ok(result) => (entry, Some(result)),
                Err((stage, record)) => {
                    warn!(seed, variant = variant.name(), stage, error = %record.message, "run failed");
                    entry.status = stage.into();
                    entry.error = Some(record);
                    (entry, None)
                }
            }
        })
        .collect()
}

type StageResult<T> = std::result::Result<T, (&'static str, Error)>;

fn run_variant(
    cfg: &ExperimentConfig,
    hash: &str,
    dir: &Path,
    seed: u64,
    variant: Variant,
    ds: &Dataset,
    entry: &mut RunEntry,
) -> StageResult<SeedResult> {
    let stage = |name: &'static str| move |e: Error| (name, e);
    let rel = PathBuf::from(format!("seed-{seed}")).join(variant.name());
    let out = dir.join(&rel);
    std::fs::create_dir_all(&out).map_err(|e| ("output", e.into()))?;
    let mut write = |file: &str, bytes: &[u8]| -> Result<()> {
        write_atomic(&out.join(file), bytes)?;
        entry.files.push(rel.join(file).to_string_lossy().into_owned());
        Ok(())
    };
    let header = csv_header(hash, &seed.to_string());

    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let ckpt = train(ds, variant, &tcfg).map_err(stage("train"))?;
    let bytes = ckpt.to_bytes();
    write("model.ckpt", &bytes).map_err(stage("output"))?;
    entry.checkpoint_hash = Some(sha256_hex(&bytes));
    entry.best_epoch = Some(ckpt.best_epoch);

    let test = ds.part(Split::Test).map_err(stage("evaluate"))?;
    let (metrics, _) = evaluate(&ckpt, &test, &cfg.predict, seed).map_err(stage("evaluate"))?;
    write("metrics.csv", metrics_csv(&header, &[(variant, metrics)]).as_bytes())
        .map_err(stage("output"))?;

    let mut curves = Vec::new();
    for spec in &cfg.curves {
        let max_k = spec.max_k.unwrap_or(ckpt.model.concepts);
        let curve = run_intervention_curve(
            &ckpt,
            &test,
            spec.policy,
            &spec.strategy,
            &cfg.predict,
            max_k,
            seed,
        )
        .map_err(stage("intervene"))?;
        let file = format!("{}.csv", spec.file_stem());
        write(&file, curve_csv(&header, &curve).as_bytes()).map_err(stage("output"))?;
        entry.unconverged.insert(file, curve.unconverged);
        curves.push((*spec, curve));
    }

    let instance = test.x.row(0).to_vec();
    let corr = correlation(&ckpt, (variant == Variant::Amortized).then_some(instance.as_slice()))
        .map_err(stage("correlation"))?;
    write("corr.csv", correlation_csv(&header, &corr).as_bytes()).map_err(stage("output"))?;

    Ok(SeedResult {
        seed,
        variant,
        metrics,
        curves,
    })
}

/// Test-split style evaluation: row `r` is predicted from the stream keyed
/// by its dataset index `batch.rows[r]`.
pub fn evaluate(
    ckpt: &Checkpoint,
    batch: &Batch,
    pcfg: &PredictConfig,
    seed: u64,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let keys: Vec<u64> = batch.rows.iter().map(|&r| r as u64).collect();
    let preds = ckpt.model.predict(&batch.x, &keys, pcfg, seed)?;
    let metrics = report(&preds, batch.concepts.data(), &batch.labels);
    Ok((metrics, preds))
}

/// Correlation matrix of the concept logits.
///
/// Global and hard models have one covariance; amortized models need the
/// covariates of the instance to evaluate it at.
pub fn correlation(ckpt: &Checkpoint, instance: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let c = ckpt.model.concepts;
    match ckpt.variant() {
        Variant::Global => {
            let l = ckpt
                .model
                .global_cholesky()
                .ok_or_else(|| Error::Format(crate::error::FormatError::Header(
                    "global checkpoint without a covariance factor".into(),
                )))?;
            Ok(correlation_from_covariance(&(&l * l.transpose())))
        }
        Variant::HardCbm => {
            let l = DMatrix::<f64>::identity(c, c) * HARD_SCALE;
            Ok(correlation_from_covariance(&(&l * l.transpose())))
        }
        Variant::Amortized => {
            let x = instance.ok_or_else(|| {
                Error::Usage("amortized checkpoints need an instance to evaluate the covariance at".into())
            })?;
            if x.len() != ckpt.model.features() {
                return Err(Error::Config(format!(
                    "instance has {} covariates, model expects {}",
                    x.len(),
                    ckpt.model.features()
                )));
            }
            let dists = ckpt.model.distributions(&Tensor::row_vector(x.to_vec()))?;
            Ok(dists[0].correlation())
        }
    }
}

pub fn csv_header(config_hash: &str, seed: &str) -> String {
    format!("# {CSV_SCHEMA} config={config_hash} seed={seed}\n")
}

fn pct(v: f64) -> String {
    format!("{:.6}", 100.0 * v)
}

pub fn metrics_csv(header: &str, rows: &[(Variant, MetricReport)]) -> String {
    let mut s = header.to_string();
    s.push_str("variant,target_accuracy,concept_accuracy,jaccard,brier,ece\n");
    for (v, m) in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            v.name(),
            pct(m.target_accuracy),
            pct(m.concept_accuracy),
            pct(m.jaccard),
            pct(m.brier),
            pct(m.ece)
        );
    }
    s
}

pub fn curve_csv(header: &str, curve: &InterventionCurve) -> String {
    let mut s = header.to_string();
    s.push_str("k,concept_accuracy,target_accuracy\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.k, pct(p.concept_accuracy), pct(p.target_accuracy));
    }
    s
}

/// Dense `C × C` matrix, one row per line, shortest round-trip floats.
pub fn correlation_csv(header: &str, corr: &DMatrix<f64>) -> String {
    let mut s = header.to_string();
    for i in 0..corr.nrows() {
        let row: Vec<String> = (0..corr.ncols()).map(|j| corr[(i, j)].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_aggregates(
    cfg: &ExperimentConfig,
    hash: &str,
    dir: &Path,
    results: &[SeedResult],
) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for &variant in &cfg.variants {
        let ok: Vec<&SeedResult> = results.iter().filter(|r| r.variant == variant).collect();
        if ok.is_empty() {
            continue;
        }
        let seeds: Vec<String> = ok.iter().map(|r| r.seed.to_string()).collect();
        let header = csv_header(hash, &seeds.join(";"));
        let rel = PathBuf::from("aggregate").join(variant.name());
        std::fs::create_dir_all(dir.join(&rel))?;

        let mut s = header.clone();
        s.push_str("metric,mean,std\n");
        let fields: [(&str, fn(&MetricReport) -> f64); 5] = [
            ("target_accuracy", |m| m.target_accuracy),
            ("concept_accuracy", |m| m.concept_accuracy),
            ("jaccard", |m| m.jaccard),
            ("brier", |m| m.brier),
            ("ece", |m| m.ece),
        ];
        for (name, get) in fields {
            let (mean, std) = mean_std(&ok.iter().map(|r| get(&r.metrics)).collect::<Vec<_>>());
            let _ = writeln!(s, "{name},{},{}", pct(mean), pct(std));
        }
        let path = rel.join("metrics.csv");
        write_atomic(&dir.join(&path), s.as_bytes())?;
        files.push(path.to_string_lossy().into_owned());

        for spec in &cfg.curves {
            let curves: Vec<&InterventionCurve> = ok
                .iter()
                .filter_map(|r| r.curves.iter().find(|(sp, _)| sp == spec).map(|(_, c)| c))
                .collect();
            let Some(first) = curves.first() else {
                continue;
            };
            let mut s = header.clone();
            s.push_str("k,concept_accuracy_mean,concept_accuracy_std,target_accuracy_mean,target_accuracy_std\n");
            for k in 0..first.points.len() {
                let (cm, cs) = mean_std(&curves.iter().map(|c| c.points[k].concept_accuracy).collect::<Vec<_>>());
                let (tm, ts) = mean_std(&curves.iter().map(|c| c.points[k].target_accuracy).collect::<Vec<_>>());
                let _ = writeln!(s, "{k},{},{},{},{}", pct(cm), pct(cs), pct(tm), pct(ts));
            }
            let path = rel.join(format!("{}.csv", spec.file_stem()));
            write_atomic(&dir.join(&path), s.as_bytes())?;
            files.push(path.to_string_lossy().into_owned());
        }
    }
    Ok(files)
}

/// Reads the instance covariates of dataset row `row`.
pub fn instance_row(ds: &Dataset, row: usize) -> Result<Vec<f64>> {
    if row >= ds.len() {
        return Err(Error::Usage(format!(
            "row {row} out of range for a dataset of {} rows",
            ds.len()
        )));
    }
    Ok(ds.x.row(row).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seeds = [3]
        variants = ["global"]
        [data]
        preset = "desk"
        n = 40
    "#;

    #[test]
    fn env_overrides_top_level_keys() {
        let env = vec![
            ("SCBM_SEEDS".to_string(), "[1, 2]".to_string()),
            ("SCBM_OUTPUT".to_string(), "/tmp/elsewhere".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_str(BASE, env).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.output, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(cfg.data.n, Some(40));
    }

    #[test]
    fn unknown_override_is_rejected() {
        let env = vec![("SCBM_TRAIN".to_string(), "1".to_string())];
        assert!(matches!(
            ExperimentConfig::from_toml_str(BASE, env),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let env = vec![("SCBM_SEEDS".to_string(), "[]".to_string())];
        assert!(ExperimentConfig::from_toml_str(BASE, env).is_err());
    }

    #[test]
    fn single_value_has_zero_spread() {
        assert_eq!(mean_std(&[0.25]), (0.25, 0.0));
    }

    #[test]
    fn correlation_csv_layout() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert_eq!(
            correlation_csv("# h\n", &m),
            "# h\n1,0.5\n0.5,1\n"
        );
    }
}
