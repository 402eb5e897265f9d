//! Synthetic tabular benchmark with a known concept covariance.
//!
//! Logits are drawn from `N(0, W·Wᵀ + D)`, concepts threshold the logits at
//! zero, covariates are a random ReLU network of the logits plus unit noise,
//! and the label thresholds a random linear score of the concepts at its
//! median.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::format::{self, ByteReader, ByteWriter};
use crate::gauss::cholesky_factor;
use crate::rng::RandomStream;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SCBMDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub p: usize,
    pub c: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    pub seed: u64,
}

fn default_rank() -> usize {
    10
}

impl SynthConfig {
    pub fn full(seed: u64) -> Self {
        Self {
            n: 50_000,
            p: 1_500,
            c: 100,
            rank: 10,
            seed,
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self {
            n: 5_000,
            p: 100,
            c: 15,
            rank: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.c == 0 || self.rank == 0 {
            return Err(Error::Config(format!(
                "synthetic sizes must be positive (n={}, p={}, c={}, rank={})",
                self.n, self.p, self.c, self.rank
            )));
        }
        Ok(())
    }

    /// Hidden width of the covariate network.
    pub fn hidden_width(&self) -> usize {
        self.p.max(2 * self.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Ground truth retained for synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    /// `N × C` logits.
    pub logits: Tensor,
    /// `C × C` covariance.
    pub sigma: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × p`.
    pub x: Tensor,
    /// `N × C`, entries 0.0 or 1.0.
    pub concepts: Tensor,
    pub labels: Vec<u8>,
    pub split: Option<Vec<Split>>,
    pub truth: Option<Truth>,
    pub source: Option<SynthConfig>,
}

/// Rows of one split in the shapes the model consumes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub x: Tensor,
    pub concepts: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.cols()
    }

    /// Row indices of a split in ascending order.
    pub fn indices(&self, which: Split) -> Result<Vec<usize>> {
        let tags = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Usage("dataset has no split assignment".into()))?;
        Ok((0..self.len()).filter(|&i| tags[i] == which).collect())
    }

    pub fn rows(&self, rows: &[usize]) -> Batch {
        Batch {
            rows: rows.to_vec(),
            x: self.x.select_rows(rows),
            concepts: self.concepts.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r] as usize).collect(),
        }
    }

    pub fn part(&self, which: Split) -> Result<Batch> {
        Ok(self.rows(&self.indices(which)?))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.concepts.rows() != n || self.labels.len() != n {
            return Err(Error::Config("dataset row counts disagree".into()));
        }
        if self.split.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::Config("split tags do not cover every row".into()));
        }
        if self.concepts.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("concepts must be binary".into()));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Config("labels must be binary".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, p, c) = (self.len(), self.num_features(), self.num_concepts());
        let header = DatasetHeader {
            n,
            p,
            c,
            has_split: self.split.is_some(),
            has_truth: self.truth.is_some(),
            source: self.source.clone(),
        };
        let mut w = ByteWriter::new();
        for j in 0..p {
            for i in 0..n {
                w.f64s(&[self.x.get(i, j)]);
            }
        }
        w.bits(self.concepts.data().iter().map(|&v| v == 1.0));
        w.bits(self.labels.iter().map(|&y| y == 1));
        if let Some(s) = &self.split {
            w.bytes(&s.iter().map(|&t| t as u8).collect::<Vec<_>>());
        }
        if let Some(t) = &self.truth {
            w.f64s(t.logits.data());
            w.f64s(t.sigma.data());
        }
        format::encode(DATASET_MAGIC, DATASET_VERSION, &header, &w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (DatasetHeader, _) =
            format::decode(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let mut r = ByteReader::new(&payload);
        let cols = r.f64s(h.n * h.p, "covariates")?;
        let mut x = Tensor::zeros(h.n, h.p);
        for j in 0..h.p {
            for i in 0..h.n {
                x.set(i, j, cols[j * h.n + i]);
            }
        }
        let bits = r.bits(h.n * h.c, "concepts")?;
        let concepts = Tensor::from_vec(
            h.n,
            h.c,
            bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
        );
        let labels = r.bits(h.n, "labels")?.into_iter().map(u8::from).collect();
        let split = if h.has_split {
            let raw = r.take(h.n, "split tags")?;
            let tags = raw
                .iter()
                .map(|&t| Split::from_u8(t))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| FormatError::Header("invalid split tag".into()))?;
            Some(tags)
        } else {
            None
        };
        let truth = if h.has_truth {
            let logits = Tensor::from_vec(h.n, h.c, r.f64s(h.n * h.c, "true logits")?);
            let sigma = Tensor::from_vec(h.c, h.c, r.f64s(h.c * h.c, "true covariance")?);
            Some(Truth { logits, sigma })
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(FormatError::Header(format!(
                "{} unexpected payload bytes",
                r.remaining()
            ))
            .into());
        }
        Ok(Dataset {
            x,
            concepts,
            labels,
            split,
            truth,
            source: h.source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    p: usize,
    c: usize,
    has_split: bool,
    has_truth: bool,
    source: Option<SynthConfig>,
}

/// Fixed random maps of one generated dataset.
struct Mechanism {
    chol: DMatrix<f64>,
    sigma: DMatrix<f64>,
    /// Weights of the covariate network, `fan_in × fan_out` each; biases are zero.
    h_layers: Vec<Tensor>,
    g: Vec<f64>,
}

impl Mechanism {
    fn draw(cfg: &SynthConfig) -> Result<Self> {
        let mut rng = RandomStream::derive(cfg.seed, &[0]);
        let c = cfg.c;
        let w = DMatrix::from_fn(c, cfg.rank, |_, _| rng.normal());
        let delta: Vec<f64> = (0..c).map(|_| rng.uniform()).collect();
        let mut sigma = &w * w.transpose();
        for (i, d) in delta.iter().enumerate() {
            sigma[(i, i)] += d;
        }
        let chol = cholesky_factor(&sigma)?;
        let hidden = cfg.hidden_width();
        let widths = [c, hidden, hidden, cfg.p];
        let h_layers = widths
            .windows(2)
            .map(|wd| {
                let scale = 1.0 / (wd[0] as f64).sqrt();
                let data = (0..wd[0] * wd[1]).map(|_| rng.normal() * scale).collect();
                Tensor::from_vec(wd[0], wd[1], data)
            })
            .collect();
        let g = (0..c).map(|_| rng.normal()).collect();
        Ok(Self {
            chol,
            sigma,
            h_layers,
            g,
        })
    }

    fn covariates(&self, eta: &[f64]) -> Tensor {
        let mut a = Tensor::row_vector(eta.to_vec());
        let last = self.h_layers.len() - 1;
        for (l, w) in self.h_layers.iter().enumerate() {
            a = a.matmul(w);
            if l < last {
                a = a.map(|v| v.max(0.0));
            }
        }
        a
    }
}

/// Draws a dataset; a pure function of `cfg`. Rows carry no split tags.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mech = Mechanism::draw(cfg)?;
    let (c, p) = (cfg.c, cfg.p);

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n)
        .into_par_iter()
        .map(|n| {
            let mut rng = RandomStream::derive(cfg.seed, &[1, n as u64]);
            let eps = rng.normals(c);
            let eta: Vec<f64> = (0..c)
                .map(|i| (0..=i).map(|j| mech.chol[(i, j)] * eps[j]).sum())
                .collect();
            let mut x = mech.covariates(&eta).into_vec();
            for v in &mut x {
                *v += rng.normal();
            }
            (eta, x)
        })
        .collect();

    let mut logits = Tensor::zeros(cfg.n, c);
    let mut x = Tensor::zeros(cfg.n, p);
    for (n, (eta, xr)) in rows.into_iter().enumerate() {
        logits.row_mut(n).copy_from_slice(&eta);
        x.row_mut(n).copy_from_slice(&xr);
    }
    let concepts = logits.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
    let scores: Vec<f64> = (0..cfg.n)
        .map(|n| concepts.row(n).iter().zip(&mech.g).map(|(a, b)| a * b).sum())
        .collect();
    let labels = median_labels(&scores);

    Ok(Dataset {
        x,
        concepts,
        labels,
        split: None,
        truth: Some(Truth {
            logits,
            sigma: Tensor::from_vec(c, c, mech.sigma.transpose().as_slice().to_vec()),
        }),
        source: Some(cfg.clone()),
    })
}

/// `1` for the `⌈N/2⌉` largest scores, ties ordered by row index.
///
/// Equals `1{score ≥ median}` whenever the scores around the median are
/// distinct, and keeps the classes balanced to within one row otherwise.
pub fn median_labels(scores: &[f64]) -> Vec<u8> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![0u8; n];
    for &i in &order[..n.div_ceil(2)] {
        labels[i] = 1;
    }
    labels
}

/// Seeded 60/20/20 assignment (train and validation sizes rounded to nearest).
pub fn split(mut ds: Dataset, seed: u64) -> Dataset {
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    RandomStream::derive(seed, &[2]).shuffle(&mut order);
    let n_train = (6 * n + 5) / 10;
    let n_val = ((2 * n + 5) / 10).min(n - n_train);
    let mut tags = vec![Split::Test; n];
    for (k, &i) in order.iter().enumerate() {
        tags[i] = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    ds.split = Some(tags);
    ds
}

/// Generates and splits with the generator seed.
pub fn generate_split(cfg: &SynthConfig) -> Result<Dataset> {
    Ok(split(generate(cfg)?, cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SynthConfig {
        SynthConfig {
            n: 301,
            p: 7,
            c: 4,
            rank: 3,
            seed,
        }
    }

    #[test]
    fn concepts_threshold_logits() {
        let ds = generate(&tiny(5)).unwrap();
        let t = ds.truth.as_ref().unwrap();
        for (c, h) in ds.concepts.data().iter().zip(t.logits.data()) {
            assert_eq!(*c == 1.0, *h >= 0.0);
        }
    }

    #[test]
    fn labels_are_balanced_under_ties() {
        let labels = median_labels(&[1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(labels, vec![1, 1, 1, 0, 0]);
        let ds = generate(&tiny(6)).unwrap();
        let ones = ds.labels.iter().filter(|&&y| y == 1).count() as i64;
        assert!((2 * ones - 301).abs() <= 2);
    }

    #[test]
    fn split_sizes_for_ten_rows() {
        let ds = split(generate(&SynthConfig { n: 10, ..tiny(1) }).unwrap(), 3);
        let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| ds.indices(s).unwrap().len())
            .collect();
        assert_eq!(sizes, vec![6, 2, 2]);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&tiny(9)).unwrap(), generate(&tiny(9)).unwrap());
        assert_ne!(generate(&tiny(9)).unwrap().x, generate(&tiny(10)).unwrap().x);
    }

    #[test]
    fn bytes_round_trip() {
        let ds = generate_split(&tiny(2)).unwrap();
        assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
    }

    #[test]
    fn newer_version_names_both_versions() {
        let ds = generate(&tiny(2)).unwrap();
        let mut bytes = ds.to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Dataset::from_bytes(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }
}
