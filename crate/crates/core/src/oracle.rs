//! Exact evidence of small instances by enumerating every firing sequence.
//!
//! Uses the same conjugate updates and lattice quadrature as the filter, so it
//! is the exact target of the particle estimate.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combo::ComboTable;
use crate::error::{MuneError, Result};
use crate::grid::{GridCache, GridPosterior, Lattice};
use crate::model::StimulusResponseSeries;
use crate::obs::{set_nu_prior, BaselineStats, FiringVector, UnitStats};
use crate::smc::{assimilate_baseline_phase, assimilate_supramaximal, SmcConfig};
use crate::special::log_sum_exp;

const MAX_PATH_BITS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLimits {
    pub max_units: usize,
    pub max_nonbaseline: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits { max_units: 2, max_nonbaseline: 12 }
    }
}

/// Exact log evidence under the default [`OracleLimits`].
pub fn exact_log_ml(series: &StimulusResponseSeries, u: usize, config: &SmcConfig) -> Result<f64> {
    exact_log_ml_with_limits(series, u, config, OracleLimits::default())
}

/// Exact log evidence; `config` supplies the prior, curve and lattice.
pub fn exact_log_ml_with_limits(
    series: &StimulusResponseSeries,
    u: usize,
    config: &SmcConfig,
    limits: OracleLimits,
) -> Result<f64> {
    config.validate(u)?;
    let tail = series.tail();
    if u > limits.max_units || tail.len() > limits.max_nonbaseline || u * tail.len() > MAX_PATH_BITS {
        return Err(MuneError::ResourceCap(format!(
            "exhaustive enumeration of {u} units over {} observations exceeds the oracle limits",
            tail.len()
        )));
    }
    let hyper = &config.hyper;
    let phase = assimilate_baseline_phase(series, hyper)?;
    let nu_prior_b = set_nu_prior(hyper.a0, hyper.delta, hyper.epsilon, &phase.stats)?;
    let lattice = Arc::new(Lattice::square(config.grid_n, config.eta_max_for(series), config.lambda_max)?);
    let mut cache = GridCache::new(Arc::clone(&lattice), config.curve);
    let (start, increment) =
        assimilate_supramaximal(u, &phase.stats, series.supramaximal(), nu_prior_b, hyper, &mut cache)?;
    let head = phase.log_ml + increment;
    if tail.is_empty() || head == f64::NEG_INFINITY {
        return Ok(head);
    }

    // predictives[id] for the grid of heap node `id`: the root is 1 and the
    // children of `id` are `2 id` (silent) and `2 id + 1` (fired)
    let n = tail.len();
    let mut predictives = vec![f64::NAN; 1 << n];
    let mut level: Vec<Option<GridPosterior>> = vec![Some(start.units()[0].grid().clone())];
    for (k, record) in tail.iter().enumerate() {
        let factors = lattice.stimulus_factors(config.curve, record.stimulus);
        let first = 1usize << k;
        for (i, g) in level.iter().enumerate() {
            if let Some(g) = g {
                predictives[first + i] = g.fire_predictive(&factors)?;
            }
        }
        if k + 1 < n {
            level = level
                .par_iter()
                .flat_map_iter(|g| {
                    [false, true].map(|bit| g.as_ref().and_then(|g| g.update(bit, &factors).ok()))
                })
                .collect();
        }
    }

    let walker = Walker { tail_y: tail.iter().map(|r| r.response).collect(), predictives, baseline: phase.stats, u };
    let rest = walker.value(0, start.stats(), &vec![1; u], true)?;
    Ok(head + rest)
}

struct Walker {
    tail_y: Vec<f64>,
    predictives: Vec<f64>,
    baseline: BaselineStats,
    u: usize,
}

impl Walker {
    /// Log evidence of the remaining observations from `level` onwards.
    fn value(&self, level: usize, stats: &UnitStats, nodes: &[usize], parallel: bool) -> Result<f64> {
        if level == self.tail_y.len() {
            return Ok(0.0);
        }
        let y = self.tail_y[level];
        let p: Vec<f64> = nodes.iter().map(|&id| self.predictives[id]).collect();
        let table = ComboTable::build(stats, &self.baseline, y, &p, 0.0)?;
        let branch = |mask: u32| -> Result<f64> {
            let x = FiringVector::new(mask, self.u);
            let lj = table.log_joint(x);
            if lj == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            let child_nodes: Vec<usize> = (0..self.u).map(|j| 2 * nodes[j] + x.get(j) as usize).collect();
            let next = if x.is_zero() { stats.clone() } else { stats.update(x, y, self.baseline.m)? };
            Ok(lj + self.value(level + 1, &next, &child_nodes, false)?)
        };
        let masks = 0..1u32 << self.u;
        let terms: Vec<f64> = if parallel {
            masks.into_par_iter().map(branch).collect::<Result<_>>()?
        } else {
            masks.map(branch).collect::<Result<_>>()?
        };
        Ok(log_sum_exp(&terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Record;
    use crate::smc::smc_run;

    fn series(tail: &[(f64, f64)]) -> StimulusResponseSeries {
        let mut records: Vec<Record> = [0.1, -0.2, 0.05, 0.3, -0.1].iter().map(|&y| Record::new(0.0, y)).collect();
        records.push(Record::new(40.0, 62.0));
        records.extend(tail.iter().map(|&(s, y)| Record::new(s, y)));
        StimulusResponseSeries::new(records, 6).unwrap()
    }

    fn config() -> SmcConfig {
        SmcConfig { grid_n: 20, n_particles: 10, ..Default::default() }
    }

    #[test]
    fn no_tail_matches_the_filter_exactly() {
        let s = series(&[]);
        let exact = exact_log_ml(&s, 2, &config()).unwrap();
        let run = smc_run(&s, 2, &config()).unwrap();
        assert_eq!(exact.to_bits(), run.log_ml.to_bits());
    }

    #[test]
    fn two_observations_expand_into_four_paths() {
        let s = series(&[(18.0, 0.4), (26.0, 61.0)]);
        let cfg = config();
        let exact = exact_log_ml(&s, 1, &cfg).unwrap();

        let phase = assimilate_baseline_phase(&s, &cfg.hyper).unwrap();
        let b0 = set_nu_prior(0.5, 0.05, 0.2, &phase.stats).unwrap();
        let lattice = Arc::new(Lattice::square(20, 44.0, 14.0).unwrap());
        let curve = cfg.curve;
        let f = |s: f64| lattice.stimulus_factors(curve, s);
        let x1 = FiringVector::ones(1);
        let prior = UnitStats::prior(1, b0, &cfg.hyper).unwrap();
        let g0 = GridPosterior::prior(Arc::clone(&lattice));
        let p_tau = g0.fire_predictive(&f(40.0)).unwrap();
        let head = phase.log_ml + prior.ln_predictive(62.0, x1, phase.stats.m) + p_tau.ln();
        let stats = prior.update(x1, 62.0, phase.stats.m).unwrap();
        let g1 = g0.update(true, &f(40.0)).unwrap();

        let mut terms = Vec::new();
        for b1 in [false, true] {
            let p1 = g1.fire_predictive(&f(18.0)).unwrap();
            let (pr1, obs1, s1) = if b1 {
                (p1, stats.ln_predictive(0.4, x1, phase.stats.m), stats.update(x1, 0.4, phase.stats.m).unwrap())
            } else {
                (1.0 - p1, phase.stats.ln_predictive(0.4), stats.clone())
            };
            let g2 = g1.update(b1, &f(18.0)).unwrap();
            let p2 = g2.fire_predictive(&f(26.0)).unwrap();
            for b2 in [false, true] {
                let (pr2, obs2) = if b2 {
                    (p2, s1.ln_predictive(61.0, x1, phase.stats.m))
                } else {
                    (1.0 - p2, phase.stats.ln_predictive(61.0))
                };
                terms.push(pr1.ln() + obs1 + pr2.ln() + obs2);
            }
        }
        let expected = head + log_sum_exp(&terms);
        assert!((exact - expected).abs() < 1e-10, "{exact} vs {expected}");
    }

    /// Log weight of every complete path, recomputed from scratch per path.
    fn flat_path_terms(s: &StimulusResponseSeries, u: usize, cfg: &SmcConfig) -> (f64, Vec<f64>) {
        let phase = assimilate_baseline_phase(s, &cfg.hyper).unwrap();
        let b0 = set_nu_prior(0.5, 0.05, 0.2, &phase.stats).unwrap();
        let lattice = Arc::new(Lattice::square(cfg.grid_n, cfg.eta_max_for(s), cfg.lambda_max).unwrap());
        let f = |st: f64| lattice.stimulus_factors(cfg.curve, st);
        let prior = UnitStats::prior(u, b0, &cfg.hyper).unwrap();
        let g0 = GridPosterior::prior(Arc::clone(&lattice));
        let head = phase.log_ml
            + prior.ln_predictive(62.0, FiringVector::ones(u), phase.stats.m)
            + u as f64 * g0.fire_predictive(&f(40.0)).unwrap().ln();
        let start = prior.update(FiringVector::ones(u), 62.0, phase.stats.m).unwrap();
        let g1 = g0.update(true, &f(40.0)).unwrap();
        let n = s.tail().len();
        let mut terms = Vec::new();
        for path in 0..1u64 << (u * n) {
            let mut stats = start.clone();
            let mut grids = vec![g1.clone(); u];
            let mut total = 0.0;
            for (k, r) in s.tail().iter().enumerate() {
                let x = FiringVector::new(((path >> (k * u)) & ((1 << u) - 1)) as u32, u);
                for j in 0..u {
                    let p = grids[j].fire_predictive(&f(r.stimulus)).unwrap();
                    total += if x.get(j) { p.ln() } else { (1.0 - p).ln() };
                }
                total += crate::obs::observation_predictive_logdensity(r.response, x, &phase.stats, &stats);
                if !x.is_zero() {
                    stats = stats.update(x, r.response, phase.stats.m).unwrap();
                }
                for j in 0..u {
                    grids[j] = match grids[j].update(x.get(j), &f(r.stimulus)) {
                        Ok(g) => g,
                        Err(_) => {
                            total = f64::NEG_INFINITY;
                            break;
                        }
                    };
                }
                if total == f64::NEG_INFINITY {
                    break;
                }
            }
            terms.push(total);
        }
        (head, terms)
    }

    #[test]
    fn recursive_enumeration_matches_flat_paths_in_any_order() {
        let s = series(&[(15.0, 0.1), (20.0, 30.5), (24.0, 31.2), (28.0, 60.0)]);
        let cfg = config();
        let exact = exact_log_ml(&s, 2, &cfg).unwrap();
        let (head, mut terms) = flat_path_terms(&s, 2, &cfg);
        assert_eq!(terms.len(), 256);
        let forward = head + log_sum_exp(&terms);
        terms.reverse();
        let backward = head + log_sum_exp(&terms);
        terms.sort_by(f64::total_cmp);
        let sorted = head + log_sum_exp(&terms);
        for v in [forward, backward, sorted] {
            assert!((v - exact).abs() < 1e-12 * exact.abs(), "{v} vs {exact}");
        }
    }

    #[test]
    fn limits_are_enforced() {
        let tail: Vec<(f64, f64)> = (0..13).map(|i| (10.0 + i as f64, 30.0)).collect();
        assert!(matches!(exact_log_ml(&series(&tail), 1, &config()), Err(MuneError::ResourceCap(_))));
        assert!(matches!(exact_log_ml(&series(&[]), 3, &config()), Err(MuneError::ResourceCap(_))));
    }
}
