//! Conjugate sufficient statistics for the observation process.
//!
//! Baseline noise `(mu_bar, nu_bar)` and the motor-unit twitch parameters
//! `(mu, nu)` each carry a (multivariate) Gaussian-gamma posterior. Baseline
//! records update the former; any record with a firing unit updates the latter
//! with the baseline statistics held fixed and baseline variance taken as zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MuneError, Result};
use crate::special::{gamma_quantile, student_t_ln_pdf};

/// Binary firing indicators for up to [`FiringVector::MAX_UNITS`] motor units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiringVector {
    bits: u32,
    units: u8,
}

impl FiringVector {
    pub const MAX_UNITS: usize = 24;

    pub fn new(bits: u32, units: usize) -> Self {
        assert!(units <= Self::MAX_UNITS, "at most {} units supported", Self::MAX_UNITS);
        let mask = if units == 32 { u32::MAX } else { (1u32 << units) - 1 };
        FiringVector { bits: bits & mask, units: units as u8 }
    }

    pub fn zeros(units: usize) -> Self {
        Self::new(0, units)
    }

    pub fn ones(units: usize) -> Self {
        Self::new(u32::MAX, units)
    }

    pub fn from_bools(fired: &[bool]) -> Self {
        let bits = fired.iter().enumerate().fold(0u32, |acc, (j, &f)| acc | ((f as u32) << j));
        Self::new(bits, fired.len())
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn units(&self) -> usize {
        self.units as usize
    }

    pub fn is_zero(&self) -> bool {
        self.bits == 0
    }

    /// Number of firing units, `x' 1`.
    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits >> j & 1 == 1
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.units()).map(move |j| self.get(j))
    }
}

/// Prior hyperparameters of the observation process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub a_bar0: f64,
    pub b_bar0: f64,
    pub m_bar0: f64,
    pub c_bar0: f64,
    /// Common prior mean of every expected twitch force.
    pub m0: f64,
    /// `C_0 = c0_scale * I`.
    pub c0_scale: f64,
    pub a0: f64,
    /// Tail probability `P(nu > epsilon nu_bar)` targeted by the `nu` prior.
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            a_bar0: 0.5,
            b_bar0: 0.1,
            m_bar0: 0.0,
            c_bar0: 1e3,
            m0: 40.0,
            c0_scale: 1e4,
            a0: 0.5,
            delta: 0.05,
            epsilon: 0.2,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a_bar0", self.a_bar0),
            ("b_bar0", self.b_bar0),
            ("c_bar0", self.c_bar0),
            ("C0_scale", self.c0_scale),
            ("a0", self.a0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MuneError::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !self.m_bar0.is_finite() || !self.m0.is_finite() {
            return Err(MuneError::Config("prior means must be finite".into()));
        }
        for (name, v) in [("delta", self.delta), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(MuneError::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Gaussian-gamma statistics `(a_bar, b_bar, m_bar, c_bar)` of the baseline noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub a: f64,
    pub b: f64,
    pub m: f64,
    pub c: f64,
}

impl BaselineStats {
    pub fn prior(h: &Hyperparameters) -> Self {
        BaselineStats { a: h.a_bar0, b: h.b_bar0, m: h.m_bar0, c: h.c_bar0 }
    }

    pub fn update(&self, y: f64) -> Result<Self> {
        if !y.is_finite() {
            return Err(MuneError::validation(format!("baseline response {y} is not finite")));
        }
        let resid = y - self.m;
        let denom = 1.0 + self.c;
        Ok(BaselineStats {
            a: self.a + 0.5,
            b: self.b + resid * resid / (2.0 * denom),
            m: self.m + self.c * resid / denom,
            c: self.c / denom,
        })
    }

    /// Student-t predictive log density of a response when no unit fires.
    pub fn ln_predictive(&self, y: f64) -> f64 {
        student_t_ln_pdf(y, self.m, self.b / self.a * (self.c + 1.0), 2.0 * self.a)
    }

    /// Posterior median of the baseline precision `nu_bar ~ Gam(a_bar, b_bar)`.
    pub fn precision_median(&self) -> Result<f64> {
        Ok(gamma_quantile(self.a, 0.5)? / self.b)
    }
}

/// Prior baseline statistics with the default hyperparameters.
pub fn init_baseline_stats() -> BaselineStats {
    BaselineStats::prior(&Hyperparameters::default())
}

pub fn baseline_update(stats: &BaselineStats, y: f64) -> Result<BaselineStats> {
    stats.update(y)
}

/// Rate `b` of the `Gam(a0, b)` prior on the unit precision `nu`, chosen so that
/// `P(nu <= epsilon * median(nu_bar)) = 1 - delta` given the baseline posterior.
pub fn set_nu_prior(a0: f64, delta: f64, epsilon: f64, baseline: &BaselineStats) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0 && epsilon > 0.0 && epsilon < 1.0) {
        return Err(MuneError::validation(format!("delta={delta} and epsilon={epsilon} must lie in (0, 1)")));
    }
    let median = baseline.precision_median()?;
    if !(median > 0.0 && median.is_finite()) {
        return Err(MuneError::numerical(format!("baseline precision median {median} is unusable")));
    }
    // Gam(a0, b) CDF at x equals the unit-rate CDF at b x, so b = Q(1 - delta; a0) / x.
    let q = gamma_quantile(a0, 1.0 - delta).map_err(|e| {
        MuneError::numerical(format!("nu prior calibration failed (a0={a0}, delta={delta}): {e}"))
    })?;
    Ok(q / (epsilon * median))
}

/// Multivariate Gaussian-gamma statistics `(a, b, m, C)` of the twitch parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub a: f64,
    pub b: f64,
    pub m: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl UnitStats {
    pub fn prior(u: usize, b0: f64, h: &Hyperparameters) -> Result<Self> {
        if u == 0 || u > FiringVector::MAX_UNITS {
            return Err(MuneError::validation(format!(
                "unit count {u} outside 1..={}",
                FiringVector::MAX_UNITS
            )));
        }
        if !(b0 > 0.0 && b0.is_finite()) {
            return Err(MuneError::validation(format!("nu prior rate {b0} must be positive")));
        }
        Ok(UnitStats {
            a: h.a0,
            b: b0,
            m: DVector::from_element(u, h.m0),
            c: DMatrix::identity(u, u) * h.c0_scale,
        })
    }

    pub fn units(&self) -> usize {
        self.m.len()
    }

    /// Attempts a Cholesky factorization.
    pub fn is_spd(&self) -> bool {
        self.c.clone().cholesky().is_some()
    }

    /// Conjugate update for a response with at least one firing unit.
    pub fn update(&self, x: FiringVector, y: f64, m_bar: f64) -> Result<Self> {
        if x.is_zero() {
            return Err(MuneError::validation("firing update requires a non-zero firing vector"));
        }
        if x.units() != self.units() {
            return Err(MuneError::validation("firing vector length does not match unit count"));
        }
        if !y.is_finite() {
            return Err(MuneError::validation(format!("response {y} is not finite")));
        }
        let u = self.units();
        let mut cx = DVector::zeros(u);
        let mut xm = 0.0;
        for j in (0..u).filter(|&j| x.get(j)) {
            cx += self.c.column(j);
            xm += self.m[j];
        }
        let xcx: f64 = (0..u).filter(|&j| x.get(j)).map(|j| cx[j]).sum();
        let q = 1.0 / (x.count() as f64 + xcx);
        if !(q > 0.0 && q.is_finite()) {
            return Err(MuneError::numerical(format!("non-positive gain q={q}; C is not positive definite")));
        }
        let resid = y - m_bar - xm;
        Ok(UnitStats {
            a: self.a + 0.5,
            b: self.b + 0.5 * q * resid * resid,
            m: &self.m + &cx * (q * resid),
            c: &self.c - (&cx * cx.transpose()) * q,
        })
    }

    /// Student-t predictive log density of `y` given a non-zero firing vector.
    pub fn ln_predictive(&self, y: f64, x: FiringVector, m_bar: f64) -> f64 {
        let u = self.units();
        let mut loc = m_bar;
        let mut quad = 0.0;
        for i in (0..u).filter(|&i| x.get(i)) {
            loc += self.m[i];
            for k in (0..u).filter(|&k| x.get(k)) {
                quad += self.c[(i, k)];
            }
        }
        student_t_ln_pdf(y, loc, self.b / self.a * (quad + x.count() as f64), 2.0 * self.a)
    }
}

/// Prior unit statistics with the default hyperparameters and rate `b0`.
pub fn init_unit_stats(u: usize, b0: f64) -> Result<UnitStats> {
    UnitStats::prior(u, b0, &Hyperparameters::default())
}

pub fn firing_update(stats: &UnitStats, x: FiringVector, y: f64, m_bar: f64) -> Result<UnitStats> {
    stats.update(x, y, m_bar)
}

/// Predictive log density of a response given the firing vector.
pub fn observation_predictive_logdensity(
    y: f64,
    x: FiringVector,
    baseline: &BaselineStats,
    units: &UnitStats,
) -> f64 {
    if x.is_zero() {
        baseline.ln_predictive(y)
    } else {
        units.ln_predictive(y, x, baseline.m)
    }
}
