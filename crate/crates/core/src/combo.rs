//! Enumeration of firing vectors for the fully adapted particle weight.

use statrs::function::gamma::ln_gamma;

use crate::error::{MuneError, Result};
use crate::obs::{BaselineStats, FiringVector, UnitStats};

/// Log joint probability of every firing vector, indexed by its bit mask.
///
/// Entry `x` is `ln P(x | p) + ln f(y | x)`; pruned vectors hold `-inf`.
#[derive(Clone, Debug)]
pub struct ComboTable {
    units: usize,
    log_joint: Vec<f64>,
    log_weight: f64,
}

/// Student-t log density split into a per-dof constant and a per-point part.
struct TKernel {
    dof: f64,
    constant: f64,
}

impl TKernel {
    fn new(dof: f64) -> Self {
        let constant = ln_gamma(0.5 * (dof + 1.0))
            - ln_gamma(0.5 * dof)
            - 0.5 * (dof * std::f64::consts::PI).ln();
        TKernel { dof, constant }
    }

    #[inline]
    fn ln_pdf(&self, resid: f64, scale_sq: f64) -> f64 {
        self.constant
            - 0.5 * scale_sq.ln()
            - 0.5 * (self.dof + 1.0) * (resid * resid / (self.dof * scale_sq)).ln_1p()
    }
}

impl ComboTable {
    /// Enumerates all `2^u` firing vectors in Gray-code order.
    ///
    /// `predictives[j]` is unit `j`'s firing probability at the current stimulus.
    /// With `prune_threshold > 0`, vectors whose prior probability falls below
    /// it are dropped (the most probable vector is always kept) and the weight
    /// is renormalized over the retained prior mass.
    pub fn build(
        stats: &UnitStats,
        baseline: &BaselineStats,
        y: f64,
        predictives: &[f64],
        prune_threshold: f64,
    ) -> Result<Self> {
        let u = stats.units();
        if predictives.len() != u {
            return Err(MuneError::validation("one firing predictive per unit is required"));
        }
        if predictives.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(MuneError::validation("firing predictives must lie in [0, 1]"));
        }
        let ln_on: Vec<f64> = predictives.iter().map(|p| p.ln()).collect();
        let ln_off: Vec<f64> = predictives.iter().map(|p| (-p).ln_1p()).collect();
        let ln_prior = |mask: u32| -> f64 {
            (0..u).map(|j| if mask >> j & 1 == 1 { ln_on[j] } else { ln_off[j] }).sum()
        };
        let ln_prune = if prune_threshold > 0.0 { prune_threshold.ln() } else { f64::NEG_INFINITY };
        let modal: u32 = (0..u).filter(|&j| predictives[j] > 0.5).fold(0, |m, j| m | 1 << j);

        let kernel = TKernel::new(2.0 * stats.a);
        let ratio = stats.b / stats.a;
        let m_bar = baseline.m;

        let n = 1usize << u;
        let mut log_joint = vec![f64::NEG_INFINITY; n];
        let mut retained_prior = Vec::new();

        let zero_prior = ln_prior(0);
        if zero_prior >= ln_prune || modal == 0 {
            log_joint[0] = zero_prior + baseline.ln_predictive(y);
            retained_prior.push(zero_prior);
        }

        let mut mask = 0u32;
        let mut cx = vec![0.0; u];
        let mut xm = 0.0;
        let mut xcx = 0.0;
        let mut count = 0usize;
        for g in 1..n as u32 {
            let j = g.trailing_zeros() as usize;
            let col = stats.c.column(j);
            if mask >> j & 1 == 0 {
                xcx += 2.0 * cx[j] + col[j];
                cx.iter_mut().zip(col.iter()).for_each(|(a, c)| *a += c);
                xm += stats.m[j];
                count += 1;
            } else {
                cx.iter_mut().zip(col.iter()).for_each(|(a, c)| *a -= c);
                xcx -= 2.0 * cx[j] + col[j];
                xm -= stats.m[j];
                count -= 1;
            }
            mask ^= 1 << j;

            let prior = ln_prior(mask);
            if prior == f64::NEG_INFINITY || (prior < ln_prune && mask != modal) {
                continue;
            }
            retained_prior.push(prior);
            let scale_sq = ratio * (xcx + count as f64);
            log_joint[mask as usize] = prior + kernel.ln_pdf(y - m_bar - xm, scale_sq);
        }

        let mut log_weight = crate::special::log_sum_exp(&log_joint);
        if prune_threshold > 0.0 {
            log_weight -= crate::special::log_sum_exp(&retained_prior);
        }
        if log_weight.is_nan() {
            return Err(MuneError::numerical("particle weight is NaN"));
        }
        Ok(ComboTable { units: u, log_joint, log_weight })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn len(&self) -> usize {
        self.log_joint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weight == f64::NEG_INFINITY
    }

    /// Log of the particle's predictive density of the response.
    pub fn log_weight(&self) -> f64 {
        self.log_weight
    }

    pub fn log_joint(&self, x: FiringVector) -> f64 {
        self.log_joint[x.bits() as usize]
    }

    /// Conditional probability of each firing vector given the response.
    pub fn probability(&self, x: FiringVector) -> f64 {
        let total = crate::special::log_sum_exp(&self.log_joint);
        (self.log_joint(x) - total).exp()
    }

    /// Inverse-CDF draws, in mask order, for uniforms sorted ascending.
    pub fn sample_sorted(&self, uniforms: &[f64]) -> Result<Vec<FiringVector>> {
        if self.is_empty() {
            return Err(MuneError::numerical("cannot propagate a particle with zero weight"));
        }
        let total = crate::special::log_sum_exp(&self.log_joint);
        let last = self.log_joint.iter().rposition(|v| *v > f64::NEG_INFINITY).unwrap();
        let mut out = Vec::with_capacity(uniforms.len());
        let mut cum = 0.0;
        let mut mask = 0usize;
        for &v in uniforms {
            debug_assert!((0.0..1.0).contains(&v));
            loop {
                let p = (self.log_joint[mask] - total).exp();
                if mask == last || (p > 0.0 && v < cum + p) {
                    break;
                }
                cum += p;
                mask += 1;
            }
            out.push(FiringVector::new(mask as u32, self.units));
        }
        Ok(out)
    }
}

/// Log weight and combo table of one particle at one observation.
pub fn particle_weight(
    stats: &UnitStats,
    baseline: &BaselineStats,
    y: f64,
    predictives: &[f64],
    prune_threshold: f64,
) -> Result<(f64, ComboTable)> {
    let table = ComboTable::build(stats, baseline, y, predictives, prune_threshold)?;
    Ok((table.log_weight(), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::{observation_predictive_logdensity, Hyperparameters};
    use crate::special::log_sum_exp;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn naive(stats: &UnitStats, baseline: &BaselineStats, y: f64, p: &[f64]) -> Vec<f64> {
        let u = stats.units();
        (0..1u32 << u)
            .map(|mask| {
                let x = FiringVector::new(mask, u);
                let prior: f64 = (0..u).map(|j| if x.get(j) { p[j].ln() } else { (1.0 - p[j]).ln() }).sum();
                prior + observation_predictive_logdensity(y, x, baseline, stats)
            })
            .collect()
    }

    fn random_stats(u: usize, seed: &[f64]) -> UnitStats {
        let a = DMatrix::from_fn(u, u, |i, j| seed[(i * u + j) % seed.len()] * 3.0);
        let c = &a * a.transpose() + DMatrix::identity(u, u) * 0.5;
        UnitStats {
            a: 2.5 + seed[0].abs(),
            b: 4.0 + seed[1].abs(),
            m: DVector::from_fn(u, |j, _| 30.0 + 10.0 * seed[j % seed.len()]),
            c,
        }
    }

    #[test]
    fn single_unit_is_a_two_term_mixture() {
        let h = Hyperparameters::default();
        let stats = UnitStats::prior(1, 3.0, &h).unwrap().update(FiringVector::ones(1), 55.0, 0.1).unwrap();
        let baseline = BaselineStats { a: 10.5, b: 0.8, m: 0.1, c: 0.05 };
        let p = 0.3;
        let t0 = baseline.ln_predictive(42.0);
        let t1 = stats.ln_predictive(42.0, FiringVector::ones(1), baseline.m);
        let expected = ((1.0 - p) * t0.exp() + p * t1.exp()).ln();
        let (lw, table) = particle_weight(&stats, &baseline, 42.0, &[p], 0.0).unwrap();
        assert!((lw - expected).abs() < 1e-12);
        assert_eq!(table.len(), 2);
    }

    #[test]
    fn zero_predictives_leave_only_the_baseline_density() {
        let h = Hyperparameters::default();
        let stats = UnitStats::prior(3, 3.0, &h).unwrap();
        let baseline = BaselineStats { a: 10.5, b: 0.8, m: 0.1, c: 0.05 };
        let (lw, _) = particle_weight(&stats, &baseline, 0.3, &[0.0; 3], 0.0).unwrap();
        assert!((lw - baseline.ln_predictive(0.3)).abs() < 1e-14);
    }

    #[test]
    fn all_combos_impossible_gives_zero_weight() {
        let h = Hyperparameters::default();
        let stats = UnitStats::prior(2, 3.0, &h).unwrap();
        let baseline = BaselineStats { a: 10.5, b: 0.8, m: 0.1, c: 0.05 };
        // p = 1 rules out x = 0, and a response this far out underflows every t density
        let table = ComboTable::build(&stats, &baseline, 1e300, &[1.0, 1.0], 0.0).unwrap();
        assert!(table.is_empty());
        assert!(table.sample_sorted(&[0.5]).is_err());
    }

    #[test]
    fn certain_combo_is_sampled_deterministically() {
        let h = Hyperparameters::default();
        let stats = UnitStats::prior(3, 3.0, &h).unwrap();
        let baseline = BaselineStats { a: 10.5, b: 0.8, m: 0.1, c: 0.05 };
        let table = ComboTable::build(&stats, &baseline, 80.0, &[1.0, 0.0, 1.0], 0.0).unwrap();
        let draws = table.sample_sorted(&[0.0, 0.3, 0.999_999]).unwrap();
        assert!(draws.iter().all(|x| x.bits() == 0b101));
    }

    #[test]
    fn pruning_renormalizes_over_retained_prior() {
        let h = Hyperparameters::default();
        let stats = UnitStats::prior(2, 3.0, &h).unwrap();
        let baseline = BaselineStats { a: 10.5, b: 0.8, m: 0.1, c: 0.05 };
        let p = [0.999, 0.5];
        let full = naive(&stats, &baseline, 45.0, &p);
        let table = ComboTable::build(&stats, &baseline, 45.0, &p, 0.01).unwrap();
        // combos with unit 0 silent have prior 5e-4 and are dropped
        assert_eq!(table.log_joint(FiringVector::new(0, 2)), f64::NEG_INFINITY);
        assert_eq!(table.log_joint(FiringVector::new(2, 2)), f64::NEG_INFINITY);
        let expected = log_sum_exp(&[full[1], full[3]]) - (0.999f64).ln();
        assert!((table.log_weight() - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gray_code_matches_naive_enumeration(
            u in 1usize..=5,
            seed in proptest::collection::vec(-1.0f64..1.0, 8),
            p in proptest::collection::vec(0.0f64..=1.0, 5),
            y in -5.0f64..200.0,
        ) {
            let stats = random_stats(u, &seed);
            let baseline = BaselineStats { a: 10.5, b: 0.8, m: 0.1, c: 0.05 };
            let expected = naive(&stats, &baseline, y, &p[..u]);
            let table = ComboTable::build(&stats, &baseline, y, &p[..u], 0.0).unwrap();
            for (mask, want) in expected.iter().enumerate() {
                let got = table.log_joint(FiringVector::new(mask as u32, u));
                if want.is_finite() {
                    prop_assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "mask {}: {} vs {}", mask, got, want);
                } else {
                    prop_assert_eq!(got, *want);
                }
            }
            let lw = log_sum_exp(&expected);
            prop_assert!((table.log_weight() - lw).abs() < 1e-12 * lw.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_frequencies_match_table() {
        use rand::{RngExt, SeedableRng};
        let stats = random_stats(3, &[0.2, -0.5, 0.7, 0.1]);
        let baseline = BaselineStats { a: 10.5, b: 0.8, m: 0.1, c: 0.05 };
        let table = ComboTable::build(&stats, &baseline, 60.0, &[0.6, 0.4, 0.5], 0.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        uniforms.sort_by(f64::total_cmp);
        let mut counts = [0usize; 8];
        for x in table.sample_sorted(&uniforms).unwrap() {
            counts[x.bits() as usize] += 1;
        }
        for (mask, &c) in counts.iter().enumerate() {
            let p = table.probability(FiringVector::new(mask as u32, 3));
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            assert!((c as f64 / n as f64 - p).abs() <= 3.0 * se + 1e-12, "mask {mask}: {c} vs {p}");
        }
    }
}
