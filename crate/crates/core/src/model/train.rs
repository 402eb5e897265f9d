use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::loss::concept_nll;
use super::{Checkpoint, GlobalInit, Model, Noise, PredictConfig, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::gauss::cholesky_factor;
use crate::intervention::PercentileTable;
use crate::metrics::argmax;
use crate::nn::{AdamConfig, AdamState, Mode};
use crate::rng::RandomStream;
use crate::synth::{Batch, Dataset, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_concept_nll: f64,
    pub train_target: f64,
    pub val_target_accuracy: f64,
    pub val_concept_nll: f64,
}

/// Mini-batch Adam on the training split.
///
/// Returns the epoch with the best validation target accuracy (ties: lower
/// validation concept NLL), with the percentile table computed from its
/// training-set logit means.
pub fn train(ds: &Dataset, variant: Variant, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    ds.validate()?;
    let train_rows = ds.indices(Split::Train)?;
    if train_rows.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let val = ds.part(Split::Val)?;
    let c = ds.num_concepts();
    let mut model = Model::new(variant, ds.num_features(), c, cfg)?;
    if variant == Variant::Global {
        let l = match cfg.global_init {
            GlobalInit::Empirical => empirical_factor(&ds.rows(&train_rows).concepts)?,
            GlobalInit::Identity => DMatrix::identity(c, c),
        };
        model.set_global_cholesky(&l)?;
    }
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, Model)> = None;
    for epoch in 0..cfg.epochs {
        let mut order = train_rows.clone();
        RandomStream::derive(cfg.seed, &[1, epoch as u64]).shuffle(&mut order);
        let (mut sum_loss, mut sum_nll, mut sum_target, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.batch_norm && chunk.len() < 2 {
                continue;
            }
            let batch = ds.rows(chunk);
            let mut rng = RandomStream::derive(cfg.seed, &[2, epoch as u64, bi as u64]);
            let noise = Noise::draw(chunk.len(), cfg.mc_samples, c, &mut rng);
            let mut tape = crate::nn::Tape::new();
            let parts = model.loss(
                &mut tape,
                &model.params,
                &batch.x,
                &batch.concepts,
                &batch.labels,
                cfg,
                &noise,
                Mode::Train,
                &mut rng,
            )?;
            let loss = tape.value(parts.total).get(0, 0);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = tape.backward(parts.total, &model.params)?;
            adam.step(&mut model.params, &grads).map_err(|e| match e {
                Error::Training(m) => {
                    Error::Training(format!("{m} (epoch {epoch}, batch {bi})"))
                }
                other => other,
            })?;
            model.update_running_stats(&parts.batch_stats)?;
            sum_loss += loss;
            sum_nll += parts.concept_nll;
            sum_target += parts.target;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let (val_acc, val_nll) = validate(&model, &val, cfg)?;
        let rec = EpochRecord {
            epoch,
            train_loss: sum_loss / nb,
            train_concept_nll: sum_nll / nb,
            train_target: sum_target / nb,
            val_target_accuracy: val_acc,
            val_concept_nll: val_nll,
        };
        debug!(?rec, variant = variant.name(), "epoch finished");
        let better = match &best {
            None => true,
            Some((_, acc, nll, _)) => val_acc > *acc || (val_acc == *acc && val_nll < *nll),
        };
        if better {
            best = Some((epoch, val_acc, val_nll, model.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, best_acc, _, best_model) = match best {
        Some(b) => b,
        None => (0, f64::NAN, f64::NAN, model),
    };
    info!(
        variant = variant.name(),
        best_epoch,
        val_target_accuracy = best_acc,
        "training finished"
    );
    let mu = best_model.means(&ds.rows(&train_rows).x)?;
    let percentiles = PercentileTable::from_logits(&mu)?;
    Ok(Checkpoint {
        model: best_model,
        config: cfg.clone(),
        percentiles,
        history,
        best_epoch,
    })
}

/// Validation target accuracy and mean concept NLL; row `r` draws from
/// fixed streams so epochs are compared on identical noise.
fn validate(model: &Model, val: &Batch, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let n = val.rows.len();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let dists = model.distributions(&val.x)?;
    let pcfg = PredictConfig {
        mc_samples: cfg.mc_samples,
        ..PredictConfig::default()
    };
    let per_row: Vec<(bool, f64)> = dists
        .par_iter()
        .enumerate()
        .map(|(r, d)| {
            let mut rng = RandomStream::derive(cfg.seed, &[3, r as u64]);
            let pred = model.predict_dist(d, &pcfg, &mut rng);
            let yhat = argmax(&pred.target_probs);
            let nll = concept_nll(val.concepts.row(r), d, cfg.mc_samples, &mut rng);
            (yhat == val.labels[r], nll)
        })
        .collect();
    let correct = per_row.iter().filter(|(ok, _)| *ok).count();
    let nll: f64 = per_row.iter().map(|(_, v)| v).sum();
    Ok((correct as f64 / n as f64, nll / n as f64))
}

/// Factor of `4·cov(c) + 1e-3·I` over the rows of a binary concept matrix.
pub(crate) fn empirical_factor(concepts: &Tensor) -> Result<DMatrix<f64>> {
    let (n, c) = concepts.shape();
    if n < 2 {
        return Ok(DMatrix::identity(c, c));
    }
    let mean: Vec<f64> = concepts.sum_rows().data().iter().map(|s| s / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for r in 0..n {
        let row = concepts.row(r);
        for i in 0..c {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in 0..=i {
            let v = 4.0 * cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += 1e-3;
    }
    cholesky_factor(&cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_factor_of_independent_columns_is_diagonal() {
        let c = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let l = empirical_factor(&c).unwrap();
        assert!(l[(1, 0)].abs() < 1e-15);
        // var = 1/3 for a balanced column over 4 rows with n−1 = 3.
        assert!((l[(0, 0)] - (4.0 / 3.0 + 1e-3f64).sqrt()).abs() < 1e-12);
    }
}
