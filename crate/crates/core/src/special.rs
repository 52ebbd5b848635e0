//! Scalar special functions used throughout the crate.
//!
//! Everything here works in log space where a density is involved. Gamma and
//! beta function evaluations are delegated to `statrs`.

use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{MuneError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `ln(exp(a) + exp(b))` without overflow; `-inf` is the additive identity.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp of a slice. Returns `-inf` for an empty slice or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `ln(1 + exp(x))`, accurate for both tails.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `ln Φ(z)`, using the Mills-ratio expansion deep in the lower tail.
pub fn ln_normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if z < -30.0 {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - 0.5 * LN_2PI - (-z).ln() + series.ln()
    } else if z > 5.0 {
        (-0.5 * erfc(z / SQRT_2)).ln_1p()
    } else {
        normal_cdf(z).ln()
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Log density of a location-scale Student-t with squared scale `scale_sq`.
pub fn student_t_ln_pdf(y: f64, loc: f64, scale_sq: f64, dof: f64) -> f64 {
    let r = y - loc;
    ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof)
        - 0.5 * (dof * std::f64::consts::PI).ln()
        - 0.5 * scale_sq.ln()
        - 0.5 * (dof + 1.0) * (r * r / (dof * scale_sq)).ln_1p()
}

/// CDF of the standard Student-t with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 1.0;
    }
    if t == f64::NEG_INFINITY {
        return 0.0;
    }
    if dof > 1e8 {
        return normal_cdf(t);
    }
    let x = dof / (dof + t * t);
    let tail = 0.5 * beta_reg(0.5 * dof, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Upper tail `P(T > t)` of the standard Student-t, computed without cancellation.
pub fn student_t_sf(t: f64, dof: f64) -> f64 {
    student_t_cdf(-t, dof)
}

/// Log density of Beta(a, b) on the open unit interval; `-inf` elsewhere.
pub fn beta_ln_pdf(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

/// Quantile of Gamma(shape, rate = 1).
///
/// Bracketed Newton iteration on the regularized lower incomplete gamma
/// function; falls back to bisection whenever a Newton step leaves the bracket.
pub fn gamma_quantile(shape: f64, p: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(MuneError::validation(format!("gamma shape must be positive, got {shape}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(MuneError::validation(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }

    let mut lo = 0.0_f64;
    let mut hi = shape.max(1.0);
    while gamma_lr(shape, hi) < p {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(MuneError::numerical(format!(
                "gamma quantile bracket failed (shape={shape}, p={p})"
            )));
        }
    }

    let ln_norm = ln_gamma(shape);
    let mut x = initial_gamma_guess(shape, p);
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..500 {
        let f = gamma_lr(shape, x) - p;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = ((shape - 1.0) * x.ln() - x - ln_norm).exp();
        let mut next = x - f / density;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if lo > 0.0 && hi / lo > 4.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        }
        let step = (next - x).abs();
        x = next;
        if step <= 1e-14 * x || hi - lo <= 1e-12 * x.max(f64::MIN_POSITIVE) || hi - lo < 1e-300 {
            return Ok(x);
        }
    }
    Err(MuneError::numerical(format!(
        "gamma quantile did not converge (shape={shape}, p={p}, bracket=[{lo}, {hi}])"
    )))
}

fn initial_gamma_guess(shape: f64, p: f64) -> f64 {
    if shape >= 1.0 {
        let z = normal_quantile(p);
        let c = 1.0 / (9.0 * shape);
        let g = shape * (1.0 - c + z * c.sqrt()).powi(3);
        if g > 0.0 {
            return g;
        }
    }
    // small-x expansion of the lower incomplete gamma
    (p * (ln_gamma(shape + 1.0)).exp()).powf(1.0 / shape)
}

/// SplitMix64 finalizer, used to derive independent seeds from a base seed.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
