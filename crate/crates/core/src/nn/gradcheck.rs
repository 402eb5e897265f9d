use super::params::ParamStore;
use crate::error::Result;
use crate::rng::RandomStream;

/// Compares analytic gradients to central finite differences.
///
/// `loss` must be a deterministic function of the parameters (fix every
/// random draw inside it). At most `max_coords` trainable coordinates are
/// checked, chosen with `rng`; `None` checks all of them. Returns
/// `max |analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(
    params: &ParamStore,
    mut loss: F,
    step: f64,
    max_coords: Option<usize>,
    rng: &mut RandomStream,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, ParamStore)>,
{
    let (_, analytic) = loss(params)?;
    let mut coords: Vec<(usize, usize)> = params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.value.len()).map(move |k| (i, k)))
        .collect();
    if let Some(n) = max_coords {
        if n < coords.len() {
            rng.shuffle(&mut coords);
            coords.truncate(n);
        }
    }
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (i, k) in coords {
        let orig = params.entries()[i].value.data()[k];
        probe.entries_mut()[i].value.data_mut()[k] = orig + step;
        let (fp, _) = loss(&probe)?;
        probe.entries_mut()[i].value.data_mut()[k] = orig - step;
        let (fm, _) = loss(&probe)?;
        probe.entries_mut()[i].value.data_mut()[k] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.entries()[i].value.data()[k];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
