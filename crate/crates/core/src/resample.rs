//! Resampling schemes for the particle population.

use rand::{Rng, RngExt};

use crate::error::{MuneError, Result};

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(MuneError::validation("cannot resample an empty population"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(MuneError::validation("resampling weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(MuneError::numerical("all particle weights are zero"));
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(MuneError::validation(format!("resampling weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Residual resampling with systematic sampling on the residuals.
///
/// Each index receives `floor(n * w_i)` copies; the remaining `R` slots are
/// filled systematically from the residual weights using `uniform` in `[0, 1)`
/// as the offset (scaled to `[0, 1/R)`). Output indices are ascending.
pub fn residual_systematic_resample_with(weights: &[f64], n: usize, uniform: f64) -> Result<Vec<usize>> {
    check_weights(weights)?;
    let mut out = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let scaled = n as f64 * w;
        let copies = scaled.floor();
        out.extend(std::iter::repeat_n(i, copies as usize));
        residual.push(scaled - copies);
    }
    // floating error can push the integer parts one past n
    out.truncate(n);
    let remaining = n - out.len();
    if remaining > 0 {
        let total: f64 = residual.iter().sum();
        if !(total > 0.0) {
            return Err(MuneError::numerical("residual weights vanished before all slots were filled"));
        }
        let step = 1.0 / remaining as f64;
        let mut target = uniform * step;
        let mut cum = 0.0;
        let mut i = 0;
        let last = residual.iter().rposition(|r| *r > 0.0).unwrap();
        for _ in 0..remaining {
            while i < last && cum + residual[i] / total <= target {
                cum += residual[i] / total;
                i += 1;
            }
            out.push(i);
            target += step;
        }
        out.sort_unstable();
    }
    Ok(out)
}

/// [`residual_systematic_resample_with`] drawing its offset from `rng`.
pub fn residual_systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let u: f64 = rng.random();
    residual_systematic_resample_with(weights, weights.len(), u)
}

/// Independent categorical draws; the reference scheme for variance comparisons.
pub fn multinomial_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    check_weights(weights)?;
    let mut cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cdf.last().unwrap();
    cdf.iter_mut().for_each(|c| *c /= total);
    let mut out: Vec<usize> = (0..weights.len())
        .map(|_| {
            let v: f64 = rng.random();
            cdf.partition_point(|&c| c <= v).min(weights.len() - 1)
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}
