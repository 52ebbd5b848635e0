//! Domain types for stimulus-response data, the excitability curve and the
//! prior densities over excitability parameters and model size.

use serde::{Deserialize, Serialize};

use crate::error::{MuneError, Result};
use crate::special::{beta_ln_pdf, ln_normal_cdf, normal_cdf, softplus};

/// Shape of both beta priors on the scaled excitability parameters.
pub const EXCITABILITY_PRIOR_SHAPE: f64 = 1.1;

/// One stimulus (volts) and the whole-muscle twitch force it produced (mN).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub stimulus: f64,
    pub response: f64,
}

impl Record {
    pub fn new(stimulus: f64, response: f64) -> Self {
        Record { stimulus, response }
    }
}

/// A re-ordered experiment: baseline records, the supramaximal record at
/// position `tau` (1-based), then the remaining records by increasing stimulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SeriesRepr")]
pub struct StimulusResponseSeries {
    records: Vec<Record>,
    tau: usize,
}

#[derive(Deserialize)]
struct SeriesRepr {
    records: Vec<Record>,
    tau: usize,
}

impl TryFrom<SeriesRepr> for StimulusResponseSeries {
    type Error = MuneError;

    fn try_from(r: SeriesRepr) -> Result<Self> {
        StimulusResponseSeries::new(r.records, r.tau)
    }
}

impl StimulusResponseSeries {
    /// Wraps already-ordered records, checking the ordering invariants.
    pub fn new(records: Vec<Record>, tau: usize) -> Result<Self> {
        let len = records.len();
        if tau < 2 {
            return Err(MuneError::validation("at least one baseline record is required (tau >= 2)"));
        }
        if tau > len {
            return Err(MuneError::validation(format!("tau={tau} exceeds series length {len}")));
        }
        for (i, r) in records.iter().enumerate() {
            if !r.stimulus.is_finite() || !r.response.is_finite() {
                return Err(MuneError::validation(format!("record {} is not finite", i + 1)));
            }
            if r.stimulus < 0.0 {
                return Err(MuneError::validation(format!("record {} has negative stimulus", i + 1)));
            }
        }
        if let Some(i) = records[..tau - 1].iter().position(|r| r.stimulus != 0.0) {
            return Err(MuneError::validation(format!(
                "baseline record {} has non-zero stimulus {}",
                i + 1,
                records[i].stimulus
            )));
        }
        let supra = records[tau - 1].stimulus;
        if records.iter().any(|r| r.stimulus > supra) {
            return Err(MuneError::validation("supramaximal record does not carry the maximum stimulus"));
        }
        if records[tau..].windows(2).any(|w| w[1].stimulus < w[0].stimulus) {
            return Err(MuneError::validation("records after the supramaximal one are not sorted by stimulus"));
        }
        Ok(StimulusResponseSeries { records, tau })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// 1-based index of the supramaximal record.
    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn baseline(&self) -> &[Record] {
        &self.records[..self.tau - 1]
    }

    pub fn supramaximal(&self) -> Record {
        self.records[self.tau - 1]
    }

    /// Records from the supramaximal one onwards, in assimilation order.
    pub fn firing_phase(&self) -> &[Record] {
        &self.records[self.tau - 1..]
    }

    /// Records strictly after the supramaximal one.
    pub fn tail(&self) -> &[Record] {
        &self.records[self.tau..]
    }
}

/// Re-orders raw records: baseline first (original order), the supramaximal
/// record next, then the rest sorted by stimulus with ties kept in input order.
pub fn reorder_series(
    raw: &[Record],
    baseline_flags: &[bool],
    supramax_flags: &[bool],
) -> Result<StimulusResponseSeries> {
    if raw.len() != baseline_flags.len() || raw.len() != supramax_flags.len() {
        return Err(MuneError::validation("flag vectors must match the number of records"));
    }
    let supra: Vec<usize> = (0..raw.len()).filter(|&i| supramax_flags[i]).collect();
    let supra = match supra.as_slice() {
        [] => return Err(MuneError::validation("no supramaximal record flagged")),
        [i] => *i,
        _ => return Err(MuneError::validation(format!("{} records flagged supramaximal", supra.len()))),
    };
    if baseline_flags[supra] {
        return Err(MuneError::validation("supramaximal record is also flagged as baseline"));
    }

    let mut records: Vec<Record> =
        raw.iter().zip(baseline_flags).filter(|(_, &b)| b).map(|(r, _)| *r).collect();
    if records.is_empty() {
        return Err(MuneError::validation("no baseline records flagged"));
    }
    let tau = records.len() + 1;
    records.push(raw[supra]);

    let mut rest: Vec<Record> = (0..raw.len())
        .filter(|&i| !baseline_flags[i] && i != supra)
        .map(|i| raw[i])
        .collect();
    // stable: equal stimuli keep their original relative order
    rest.sort_by(|a, b| a.stimulus.total_cmp(&b.stimulus));
    records.extend(rest);

    StimulusResponseSeries::new(records, tau)
}

/// Median threshold `eta` and reciprocal slope at the median `lambda`, both in volts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitabilityParams {
    pub eta: f64,
    pub lambda: f64,
}

impl ExcitabilityParams {
    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite() && lambda > 0.0 && lambda.is_finite()) {
            return Err(MuneError::validation(format!(
                "excitability parameters must be positive and finite (eta={eta}, lambda={lambda})"
            )));
        }
        Ok(ExcitabilityParams { eta, lambda })
    }

    /// Checks the parameters against the prior support bounds.
    pub fn within(&self, eta_max: f64, lambda_max: f64) -> bool {
        self.eta > 0.0 && self.eta <= eta_max && self.lambda > 0.0 && self.lambda <= lambda_max
    }
}

/// Sigmoidal probability that a motor unit fires at a given stimulus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcitabilityCurve {
    /// `F(s) = [1 + (s/eta)^(-4 eta/lambda)]^-1`, exactly zero at `s = 0`.
    #[default]
    LogLogistic,
    /// `F(s) = Phi(delta (s - eta))` with `delta = sqrt(2 pi)/lambda`; positive at `s = 0`.
    GaussianCdf,
}

impl ExcitabilityCurve {
    /// Firing probability. Callers are responsible for finite, non-negative `s`.
    pub fn prob(self, s: f64, eta: f64, lambda: f64) -> f64 {
        match self {
            ExcitabilityCurve::LogLogistic => {
                if s == 0.0 {
                    return 0.0;
                }
                let shape = 4.0 * eta / lambda;
                1.0 / (1.0 + (s / eta).powf(-shape))
            }
            ExcitabilityCurve::GaussianCdf => normal_cdf(gaussian_delta(lambda) * (s - eta)),
        }
    }

    /// `(ln F, ln(1 - F))`, accurate in both tails.
    pub fn ln_prob_pair(self, s: f64, eta: f64, lambda: f64) -> (f64, f64) {
        match self {
            ExcitabilityCurve::LogLogistic => {
                if s == 0.0 {
                    return (f64::NEG_INFINITY, 0.0);
                }
                let z = 4.0 * eta / lambda * (s / eta).ln();
                (-softplus(-z), -softplus(z))
            }
            ExcitabilityCurve::GaussianCdf => {
                let z = gaussian_delta(lambda) * (s - eta);
                (ln_normal_cdf(z), ln_normal_cdf(-z))
            }
        }
    }

    /// Analytic derivative of `F` at `s = eta`; both curves give `1/lambda`.
    pub fn slope_at_median(self, p: ExcitabilityParams) -> f64 {
        match self {
            // d/ds [1 + (s/eta)^-k]^-1 at s = eta is k/(4 eta) = 1/lambda
            ExcitabilityCurve::LogLogistic => 4.0 * p.eta / p.lambda / (4.0 * p.eta),
            // phi(0) * delta
            ExcitabilityCurve::GaussianCdf => gaussian_delta(p.lambda) / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }
}

fn gaussian_delta(lambda: f64) -> f64 {
    (2.0 * std::f64::consts::PI).sqrt() / lambda
}

/// Firing probability with input validation.
pub fn excitability_prob(curve: ExcitabilityCurve, s: f64, p: ExcitabilityParams) -> Result<f64> {
    if !s.is_finite() || s < 0.0 {
        return Err(MuneError::validation(format!("stimulus must be finite and non-negative, got {s}")));
    }
    let p = ExcitabilityParams::new(p.eta, p.lambda)?;
    Ok(curve.prob(s, p.eta, p.lambda))
}

pub fn excitability_slope_at_median(curve: ExcitabilityCurve, p: ExcitabilityParams) -> f64 {
    curve.slope_at_median(p)
}

/// Coefficient of variation of the log-logistic variable whose CDF is the
/// excitability curve: `CV^2 = tan(b)/b - 1` with `b = pi lambda / (4 eta)`.
pub fn cv_of_excitability(p: ExcitabilityParams) -> Result<f64> {
    let p = ExcitabilityParams::new(p.eta, p.lambda)?;
    let ratio = p.lambda / p.eta;
    if ratio >= 2.0 {
        return Err(MuneError::validation(format!(
            "variance undefined: lambda/eta = {ratio} >= 2 (log-logistic shape <= 2)"
        )));
    }
    let b = std::f64::consts::PI * ratio / 4.0;
    let cv2 = if b < 1e-4 {
        b * b / 3.0 + 2.0 * b.powi(4) / 15.0
    } else {
        b.tan() / b - 1.0
    };
    Ok(cv2.sqrt())
}

/// Truncated Geom(1/2) prior on the number of motor units.
pub fn model_prior(u: usize, u_max: usize) -> Result<f64> {
    Ok(ln_model_prior(u, u_max)?.exp())
}

pub fn ln_model_prior(u: usize, u_max: usize) -> Result<f64> {
    if u == 0 || u > u_max {
        return Err(MuneError::validation(format!("model size {u} outside 1..={u_max}")));
    }
    let ln_half = -std::f64::consts::LN_2;
    Ok(u as f64 * ln_half - (-(0.5f64.powi(u_max as i32))).ln_1p())
}

/// Joint log prior density of `(eta, lambda)`: independent Beta(1.1, 1.1)
/// on `eta/eta_max` and `lambda/lambda_max`, including the Jacobians.
pub fn excitability_prior_logdensity(p: ExcitabilityParams, eta_max: f64, lambda_max: f64) -> f64 {
    let a = EXCITABILITY_PRIOR_SHAPE;
    beta_ln_pdf(p.eta / eta_max, a, a) + beta_ln_pdf(p.lambda / lambda_max, a, a)
        - (eta_max * lambda_max).ln()
}
