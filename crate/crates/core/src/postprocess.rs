//! Evidence recalibration and posterior summaries from a finished run.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{MuneError, Result};
use crate::grid::{marginal_interval, Interval};
use crate::model::StimulusResponseSeries;
use crate::orthant::{student_t_orthant, OrthantQuery};
use crate::smc::{Particle, RunResult};
use crate::special::{mix_seed, student_t_cdf};

/// Default lower bound on every expected twitch force, in mN.
pub const DEFAULT_MU_MIN: f64 = 15.0;
pub const DEFAULT_ORTHANT_SE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalibration {
    #[serde(with = "crate::serde_ext::float")]
    pub raw_log_ml: f64,
    #[serde(with = "crate::serde_ext::float")]
    pub adjusted_log_ml: f64,
    #[serde(with = "crate::serde_ext::float")]
    pub mu_min: f64,
    pub prior_orthant: f64,
    pub posterior_orthant: f64,
    pub posterior_orthant_se: f64,
}

/// Whether `mu_min` requests a recalibration; zero, negative and `-inf` disable it.
pub fn recalibration_enabled(mu_min: f64) -> bool {
    mu_min > 0.0
}

/// `log_ml + ln P(all mu_j >= mu_min | y) - ln P(all mu_j >= mu_min)`.
///
/// The posterior probability averages the orthants of the per-particle
/// Student-t marginals of the twitch forces.
pub fn recalibrate_log_ml(run: &RunResult, mu_min: f64, seed: u64, target_se: f64) -> Result<Recalibration> {
    let identity = Recalibration {
        raw_log_ml: run.log_ml,
        adjusted_log_ml: run.log_ml,
        mu_min,
        prior_orthant: 1.0,
        posterior_orthant: 1.0,
        posterior_orthant_se: 0.0,
    };
    if mu_min.is_nan() {
        return Err(MuneError::validation("mu_min must be a number"));
    }
    if !recalibration_enabled(mu_min) {
        return Ok(identity);
    }
    let u = run.u;
    let h = &run.config.hyper;
    let prior = OrthantQuery {
        location: DVector::from_element(u, h.m0),
        shape: DMatrix::identity(u, u) * (run.nu_prior_b / h.a0 * h.c0_scale),
        dof: 2.0 * h.a0,
        lower_bound: mu_min,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u as u64, u64::MAX));
    let prior_est = student_t_orthant(&prior, &mut rng, target_se)?;
    if !(prior_est.probability > 0.0) {
        return Err(MuneError::Config(format!(
            "mu_min = {mu_min} leaves no prior mass for {u} units; choose a smaller bound"
        )));
    }
    if run.log_ml == f64::NEG_INFINITY {
        return Ok(Recalibration { prior_orthant: prior_est.probability, ..identity });
    }

    let particles = run.unique_particles();
    let estimates: Vec<Result<(f64, f64)>> = particles
        .par_iter()
        .enumerate()
        .map(|(i, (p, _))| {
            let s = p.stats();
            let q = OrthantQuery {
                location: s.m.clone(),
                shape: &s.c * (s.b / s.a),
                dof: 2.0 * s.a,
                lower_bound: mu_min,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u as u64, i as u64));
            let e = student_t_orthant(&q, &mut rng, target_se)?;
            Ok((e.probability, e.standard_error))
        })
        .collect();
    let n = run.particles.len() as f64;
    let mut post = 0.0;
    let mut var = 0.0;
    for ((_, count), e) in particles.iter().zip(estimates) {
        let (p, se) = e?;
        let w = *count as f64 / n;
        post += w * p;
        var += (w * se).powi(2);
    }
    let adjusted = run.log_ml + post.ln() - prior_est.probability.ln();
    Ok(Recalibration {
        raw_log_ml: run.log_ml,
        adjusted_log_ml: adjusted,
        mu_min,
        prior_orthant: prior_est.probability,
        posterior_orthant: post,
        posterior_orthant_se: var.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    /// Rank by posterior mean threshold, starting at 1.
    pub label: usize,
    pub mu: Interval,
    pub eta: Interval,
    pub lambda: Interval,
    pub eta_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub units: Vec<UnitSummary>,
    /// Twitch-force variance shared by all units.
    pub nu_inv: Interval,
    pub baseline_mean: Interval,
    pub baseline_nu_inv: Interval,
}

/// Per-particle permutation putting units in order of increasing posterior mean threshold.
pub fn unit_order(p: &Particle) -> Vec<usize> {
    let means: Vec<f64> = p.units().iter().map(|e| e.grid().summary().eta_mean).collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    order
}

/// Quantile of a monotone CDF by bisection to `1e-6` absolute.
fn invert_cdf(cdf: impl Fn(f64) -> f64, q: f64, mut lo: f64, mut hi: f64) -> f64 {
    while cdf(lo) > q {
        lo -= 2.0 * (hi - lo).max(1.0);
    }
    while cdf(hi) < q {
        hi += 2.0 * (hi - lo).max(1.0);
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn interval_from_cdf(cdf: impl Fn(f64) -> f64 + Copy, lo: f64, hi: f64) -> Interval {
    Interval {
        median: invert_cdf(cdf, 0.5, lo, hi),
        lower: invert_cdf(cdf, 0.025, lo, hi),
        upper: invert_cdf(cdf, 0.975, lo, hi),
    }
}

/// Equal-weight-per-member mixture of location-scale Student-t marginals `(loc, scale, dof, weight)`.
pub fn t_mixture_interval(components: &[(f64, f64, f64, f64)]) -> Interval {
    let cdf = |x: f64| -> f64 { components.iter().map(|&(m, s, d, w)| w * student_t_cdf((x - m) / s, d)).sum() };
    let lo = components.iter().map(|c| c.0 - c.1).fold(f64::INFINITY, f64::min);
    let hi = components.iter().map(|c| c.0 + c.1).fold(f64::NEG_INFINITY, f64::max);
    interval_from_cdf(cdf, lo, hi)
}

/// Mixture of inverse-gamma laws `(shape, scale, weight)`.
pub fn inverse_gamma_mixture_interval(components: &[(f64, f64, f64)]) -> Interval {
    let cdf = |v: f64| -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        components.iter().map(|&(a, b, w)| w * gamma_ur(a, b / v)).sum()
    };
    let mut hi = components.iter().map(|c| c.1 / c.0).fold(1e-12, f64::max);
    while cdf(hi) < 0.975 {
        hi *= 2.0;
    }
    let q = |p: f64| {
        let (mut lo, mut up) = (0.0, hi);
        while up - lo > 1e-6 * up.max(1e-3) {
            let mid = 0.5 * (lo + up);
            if cdf(mid) < p {
                lo = mid;
            } else {
                up = mid;
            }
        }
        0.5 * (lo + up)
    };
    Interval { median: q(0.5), lower: q(0.025), upper: q(0.975) }
}

pub fn posterior_mixture_summaries(run: &RunResult) -> Result<ParameterReport> {
    let particles = run.unique_particles();
    let n = run.particles.len() as f64;
    let u = run.u;
    let lat = &run.lattice;
    let orders: Vec<Vec<usize>> = particles.par_iter().map(|(p, _)| unit_order(p)).collect();

    let mut units = Vec::with_capacity(u);
    for label in 0..u {
        let mut mu = Vec::new();
        let mut eta_density = vec![0.0; lat.n_eta()];
        let mut lambda_density = vec![0.0; lat.n_lambda()];
        let mut eta_mean = 0.0;
        for ((p, count), order) in particles.iter().zip(&orders) {
            let w = *count as f64 / n;
            let j = order[label];
            let s = p.stats();
            mu.push((s.m[j], (s.b / s.a * s.c[(j, j)]).sqrt(), 2.0 * s.a, w));
            let grid = p.units()[j].grid();
            let (em, lm) = grid.marginals();
            eta_density.iter_mut().zip(em).for_each(|(acc, v)| *acc += w * v);
            lambda_density.iter_mut().zip(lm).for_each(|(acc, v)| *acc += w * v);
            eta_mean += w * grid.summary().eta_mean;
        }
        let etas: Vec<f64> = (0..lat.n_eta()).map(|i| lat.eta(i)).collect();
        let lambdas: Vec<f64> = (0..lat.n_lambda()).map(|k| lat.lambda(k)).collect();
        units.push(UnitSummary {
            label: label + 1,
            mu: t_mixture_interval(&mu),
            eta: marginal_interval(&etas, &eta_density),
            lambda: marginal_interval(&lambdas, &lambda_density),
            eta_mean,
        });
    }

    let nu: Vec<(f64, f64, f64)> =
        particles.iter().map(|(p, c)| (p.stats().a, p.stats().b, *c as f64 / n)).collect();
    let b = &run.baseline;
    Ok(ParameterReport {
        units,
        nu_inv: inverse_gamma_mixture_interval(&nu),
        baseline_mean: t_mixture_interval(&[(b.m, (b.b / b.a * b.c).sqrt(), 2.0 * b.a, 1.0)]),
        baseline_nu_inv: inverse_gamma_mixture_interval(&[(b.a, b.b, 1.0)]),
    })
}

/// One cluster of similar responses and its most common relabelled firing vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: f64,
    pub records: usize,
    pub firing: Vec<u8>,
    pub frequency: f64,
}

/// Groups responses into levels (single linkage, new level when the gap to the
/// previous sorted response exceeds `level_tolerance`) and reports the modal
/// firing vector per level across particles and records.
pub fn modal_firing_by_level(
    run: &RunResult,
    series: &StimulusResponseSeries,
    level_tolerance: f64,
) -> Result<Vec<LevelRow>> {
    if !(level_tolerance > 0.0) {
        return Err(MuneError::validation("level tolerance must be positive"));
    }
    let records = series.records();
    let first = series.tau() - 1;
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[a].response.total_cmp(&records[b].response).then(a.cmp(&b)));
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        if k == 0 || records[i].response - records[idx[k - 1]].response > level_tolerance {
            levels.push(Vec::new());
        }
        levels.last_mut().unwrap().push(i);
    }

    let particles = run.unique_particles();
    let orders: Vec<Vec<usize>> = particles.iter().map(|(p, _)| unit_order(p)).collect();
    let history_len = particles[0].0.units()[0].key().len();
    let n = run.particles.len() as f64;
    let mut rows = Vec::with_capacity(levels.len());
    for members in levels {
        let mut tally: HashMap<Vec<u8>, f64> = HashMap::new();
        let mut total = 0.0;
        for &t in &members {
            for ((p, count), order) in particles.iter().zip(&orders) {
                let fired: Vec<u8> = if t < first || t - first >= history_len {
                    vec![0; run.u]
                } else {
                    let x = p.firing_at(t - first);
                    order.iter().map(|&j| x.get(j) as u8).collect()
                };
                *tally.entry(fired).or_default() += *count as f64 / n;
                total += *count as f64 / n;
            }
        }
        let (firing, mass) = tally
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("levels are non-empty");
        let level = members.iter().map(|&t| records[t].response).sum::<f64>() / members.len() as f64;
        rows.push(LevelRow { level, records: members.len(), firing, frequency: mass / total });
    }
    Ok(rows)
}

/// Posterior mean response at every record: baseline mean plus the expected fired force.
pub fn fitted_means(run: &RunResult, series: &StimulusResponseSeries) -> Vec<f64> {
    let particles = run.unique_particles();
    let first = series.tau() - 1;
    let n = run.particles.len() as f64;
    let history_len = particles[0].0.units()[0].key().len();
    (0..series.len())
        .map(|t| {
            if t < first || t - first >= history_len {
                return run.baseline.m;
            }
            particles
                .iter()
                .map(|(p, c)| {
                    let x = p.firing_at(t - first);
                    let force: f64 = (0..run.u).filter(|&j| x.get(j)).map(|j| p.stats().m[j]).sum();
                    *c as f64 / n * (run.baseline.m + force)
                })
                .sum()
        })
        .collect()
}

/// Posterior mean and pointwise 95% band of a unit's excitability curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub unit: usize,
    pub stimulus: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn excitability_bands(run: &RunResult, stimuli: &[f64]) -> Vec<CurvePoint> {
    let particles = run.unique_particles();
    let orders: Vec<Vec<usize>> = particles.iter().map(|(p, _)| unit_order(p)).collect();
    let n = run.particles.len() as f64;
    let lat = &run.lattice;
    let curve = run.config.curve;
    let mut out = Vec::new();
    for label in 0..run.u {
        // vertex masses of the label's mixture posterior
        let mut mass = vec![0.0; lat.len()];
        for ((p, c), order) in particles.iter().zip(&orders) {
            let grid = p.units()[order[label]].grid();
            let scaled: Vec<f64> =
                grid.log_values().iter().zip(lat.weights()).map(|(v, w)| w * (v - grid.max_log()).exp()).collect();
            let total: f64 = scaled.iter().sum();
            mass.iter_mut().zip(scaled).for_each(|(m, v)| *m += *c as f64 / n * v / total);
        }
        for &s in stimuli {
            let mut pts: Vec<(f64, f64)> = (0..lat.len())
                .filter(|&i| mass[i] > 0.0)
                .map(|i| {
                    let (eta, lambda) = lat.coords(i);
                    (curve.prob(s, eta, lambda), mass[i])
                })
                .collect();
            let mean = pts.iter().map(|(f, m)| f * m).sum();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let quantile = |q: f64| {
                let mut acc = 0.0;
                for &(f, m) in &pts {
                    acc += m;
                    if acc >= q {
                        return f;
                    }
                }
                pts.last().map(|p| p.0).unwrap_or(0.0)
            };
            out.push(CurvePoint { unit: label + 1, stimulus: s, mean, lower: quantile(0.025), upper: quantile(0.975) });
        }
    }
    out
}

/// Posterior predictive density of a new response at `stimulus`, evaluated at `ys`.
pub fn predictive_density(run: &RunResult, stimulus: f64, ys: &[f64]) -> Result<Vec<f64>> {
    let particles = run.unique_particles();
    let n = run.particles.len() as f64;
    let factors = run.lattice.stimulus_factors(run.config.curve, stimulus);
    let per_particle: Vec<Result<Vec<f64>>> = particles
        .par_iter()
        .map(|(p, c)| {
            let pred = p.predictives(&factors)?;
            ys.iter()
                .map(|&y| {
                    let table = crate::combo::ComboTable::build(p.stats(), &run.baseline, y, &pred, 0.0)?;
                    Ok(*c as f64 / n * table.log_weight().exp())
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; ys.len()];
    for r in per_particle {
        out.iter_mut().zip(r?).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}
