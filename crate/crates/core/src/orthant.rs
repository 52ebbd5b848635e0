//! Upper orthant probabilities of the multivariate Student-t distribution.
//!
//! Sequential conditioning with a radial chi variable turns the probability
//! into an integral over the unit cube, estimated by randomly shifted lattice
//! rules. Variables are reordered by their marginal tail so the hardest
//! constraints are integrated first.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{MuneError, Result};
use crate::special::{gamma_quantile, normal_cdf, normal_quantile, student_t_sf};

const SHIFTS: usize = 10;
const INITIAL_POINTS: usize = 128;
const MAX_POINTS: usize = 1 << 16;
const PRIMES: [f64; 24] = [
    2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0, 59.0, 61.0, 67.0,
    71.0, 73.0, 79.0, 83.0, 89.0,
];

/// `P(X_j >= lower_bound for all j)` for `X ~ MVT(location, shape, dof)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthantQuery {
    pub location: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub dof: f64,
    pub lower_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthantEstimate {
    pub probability: f64,
    pub standard_error: f64,
    /// False when the point cap was reached before the target standard error.
    pub converged: bool,
}

impl OrthantEstimate {
    fn exact(p: f64) -> Self {
        OrthantEstimate { probability: p, standard_error: 0.0, converged: true }
    }
}

impl OrthantQuery {
    fn validate(&self) -> Result<()> {
        let u = self.location.len();
        if u == 0 || u > PRIMES.len() || self.shape.nrows() != u || self.shape.ncols() != u {
            return Err(MuneError::validation("orthant query dimensions are inconsistent"));
        }
        if !(self.dof > 0.0) {
            return Err(MuneError::validation(format!("dof must be positive, got {}", self.dof)));
        }
        if self.lower_bound.is_nan() || self.location.iter().any(|v| !v.is_finite()) {
            return Err(MuneError::validation("orthant location and bound must be numbers"));
        }
        Ok(())
    }

    /// Standardized distances `(location_j - lower_bound) / sqrt(shape_jj)`.
    fn standardized(&self) -> Vec<f64> {
        (0..self.location.len())
            .map(|j| (self.location[j] - self.lower_bound) / self.shape[(j, j)].sqrt())
            .collect()
    }
}

/// Scale factor `sqrt(chi2_dof / dof)` at cumulative probability `w`.
fn chi_radius(dof: f64, w: f64) -> Result<f64> {
    if dof > 1e8 {
        return Ok(1.0);
    }
    Ok((2.0 * gamma_quantile(0.5 * dof, w)? / dof).sqrt())
}

pub fn student_t_orthant<R: Rng + ?Sized>(q: &OrthantQuery, rng: &mut R, target_se: f64) -> Result<OrthantEstimate> {
    q.validate()?;
    if q.lower_bound == f64::NEG_INFINITY {
        return Ok(OrthantEstimate::exact(1.0));
    }
    let u = q.location.len();
    if q.shape.clone().cholesky().is_none() {
        return Err(MuneError::numerical("orthant shape matrix is not positive definite"));
    }
    let z = q.standardized();
    if u == 1 {
        return Ok(OrthantEstimate::exact(student_t_sf(-z[0], q.dof)));
    }

    // Bonferroni bounds settle orthants that are numerically certain
    let tails: Vec<f64> = z.iter().map(|&v| student_t_sf(v, q.dof)).collect();
    let union: f64 = tails.iter().sum();
    let largest = tails.iter().copied().fold(0.0, f64::max);
    if union - largest <= 1e-3 * target_se {
        let lo = (1.0 - union).max(0.0);
        let hi = 1.0 - largest;
        return Ok(OrthantEstimate { probability: 0.5 * (lo + hi), standard_error: 0.5 * (hi - lo), converged: true });
    }

    let mut order: Vec<usize> = (0..u).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let permuted = DMatrix::from_fn(u, u, |i, k| q.shape[(order[i], order[k])]);
    let chol = permuted.cholesky().expect("permutation preserves definiteness").l();
    let bounds: Vec<f64> = order.iter().map(|&j| q.location[j] - q.lower_bound).collect();

    let generator: Vec<f64> = PRIMES[..u].iter().map(|p| p.sqrt().fract()).collect();
    let shifts: Vec<Vec<f64>> = (0..SHIFTS).map(|_| (0..u).map(|_| rng.random::<f64>()).collect()).collect();
    let mut sums = [0.0; SHIFTS];
    let mut done = 0usize;
    let mut n = INITIAL_POINTS;
    let mut w = vec![0.0; u];
    let mut y = vec![0.0; u];
    loop {
        for (shift, sum) in shifts.iter().zip(sums.iter_mut()) {
            for i in done + 1..=n {
                for k in 0..u {
                    let x = (i as f64 * generator[k] + shift[k]).fract();
                    w[k] = (1.0 - (2.0 * x - 1.0).abs()).clamp(1e-15, 1.0 - 1e-15);
                }
                *sum += conditional_product(&w, &bounds, &chol, q.dof, &mut y)?;
            }
        }
        done = n;
        let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        let mean = means.iter().sum::<f64>() / SHIFTS as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (SHIFTS - 1) as f64;
        let se = (var / SHIFTS as f64).sqrt();
        if se <= target_se || n >= MAX_POINTS {
            return Ok(OrthantEstimate { probability: mean, standard_error: se, converged: se <= target_se });
        }
        n *= 2;
    }
}

fn conditional_product(w: &[f64], bounds: &[f64], chol: &DMatrix<f64>, dof: f64, y: &mut [f64]) -> Result<f64> {
    let u = bounds.len();
    let s = chi_radius(dof, w[0])?;
    let mut f = 1.0;
    for i in 0..u {
        let shift: f64 = (0..i).map(|k| chol[(i, k)] * y[k]).sum();
        let e = normal_cdf((bounds[i] * s - shift) / chol[(i, i)]);
        f *= e;
        if f == 0.0 {
            return Ok(0.0);
        }
        if i + 1 < u {
            y[i] = normal_quantile((w[i + 1] * e).clamp(1e-300, 1.0 - 1e-16));
        }
    }
    Ok(f)
}

/// Orthant of a diagonal-shape multivariate t by one-dimensional quadrature
/// over the shared chi variable; the coordinates are dependent through it.
pub fn diagonal_orthant(standardized: &[f64], dof: f64) -> Result<f64> {
    if dof > 1e8 {
        return Ok(standardized.iter().map(|&z| normal_cdf(z)).product());
    }
    let f = |w: f64| -> f64 {
        let s = chi_radius(dof, w).unwrap_or(f64::NAN);
        standardized.iter().map(|&z| normal_cdf(z * s)).product()
    };
    let v = adaptive_simpson(&f, 1e-12, 1.0 - 1e-12, 1e-12, 40);
    if !v.is_finite() {
        return Err(MuneError::numerical("radial quadrature failed"));
    }
    Ok(v)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{ChiSquared, Distribution, StandardNormal};

    fn query(loc: &[f64], shape: DMatrix<f64>, dof: f64, lb: f64) -> OrthantQuery {
        OrthantQuery { location: DVector::from_column_slice(loc), shape, dof, lower_bound: lb }
    }

    #[test]
    fn full_support_is_one() {
        let q = query(&[1.0, 2.0], DMatrix::identity(2, 2), 3.0, f64::NEG_INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(student_t_orthant(&q, &mut rng, 1e-4).unwrap().probability, 1.0);
    }

    #[test]
    fn univariate_is_the_t_tail() {
        let q = query(&[40.0], DMatrix::from_element(1, 1, 400.0), 5.0, 15.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = student_t_orthant(&q, &mut rng, 1e-4).unwrap();
        assert!((est.probability - student_t_sf(-1.25, 5.0)).abs() < 1e-15);
    }

    #[test]
    fn diagonal_shape_matches_radial_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(dof, u) in &[(1.0, 3usize), (5.0, 4), (30.0, 6)] {
            let loc: Vec<f64> = (0..u).map(|j| 20.0 + 5.0 * j as f64).collect();
            let shape = DMatrix::from_fn(u, u, |i, k| if i == k { 25.0 + 10.0 * i as f64 } else { 0.0 });
            let q = query(&loc, shape, dof, 15.0);
            let est = student_t_orthant(&q, &mut rng, 1e-5).unwrap();
            let exact = diagonal_orthant(&q.standardized(), dof).unwrap();
            assert!((est.probability - exact).abs() < 1e-4, "dof={dof}: {} vs {exact}", est.probability);
            // the shared radius couples the coordinates, so this is not the product of tails
            let product: f64 = q.standardized().iter().map(|&z| student_t_sf(-z, dof)).product();
            if dof < 10.0 {
                assert!((exact - product).abs() > 1e-3);
            }
        }
    }

    #[test]
    fn large_dof_diagonal_matches_gaussian_product() {
        let z = [0.3, 1.1, -0.4];
        let shape = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 9.0, 1.0]));
        let q = query(&[0.6, 3.3, -0.4], shape, 1e4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = student_t_orthant(&q, &mut rng, 1e-5).unwrap();
        let gauss: f64 = z.iter().map(|&v| normal_cdf(v)).product();
        assert!((est.probability - gauss).abs() < 1e-4, "{} vs {gauss}", est.probability);
    }

    #[test]
    fn correlated_case_agrees_with_plain_monte_carlo() {
        let shape = DMatrix::from_row_slice(3, 3, &[4.0, 1.5, -0.8, 1.5, 3.0, 0.6, -0.8, 0.6, 2.0]);
        let q = query(&[1.0, 0.5, 0.8], shape.clone(), 30.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = student_t_orthant(&q, &mut rng, 1e-4).unwrap();

        let l = shape.cholesky().unwrap().l();
        let chi = ChiSquared::new(30.0).unwrap();
        let n = 10_000_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let e = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let s = (chi.sample(&mut rng) / 30.0f64).sqrt();
            let x = &q.location + (&l * e) / s;
            hits += x.iter().all(|&v| v >= 0.0) as usize;
        }
        let p = hits as f64 / n as f64;
        let se_mc = (p * (1.0 - p) / n as f64).sqrt();
        let combined = (se_mc * se_mc + est.standard_error.powi(2)).sqrt();
        assert!((est.probability - p).abs() < 3.0 * combined, "{} vs {p} (se {combined})", est.probability);
    }

    #[test]
    fn monotone_in_the_lower_bound() {
        let shape = DMatrix::from_row_slice(2, 2, &[100.0, 30.0, 30.0, 150.0]);
        let mut prev = 1.0;
        let mut prev_se = 0.0;
        for i in 0..12 {
            let lb = -10.0 + 5.0 * i as f64;
            let q = query(&[20.0, 25.0], shape.clone(), 4.0, lb);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let est = student_t_orthant(&q, &mut rng, 1e-5).unwrap();
            assert!(est.probability <= prev + 3.0 * (est.standard_error + prev_se), "lb={lb}");
            prev = est.probability;
            prev_se = est.standard_error;
        }
    }

    #[test]
    fn rejects_indefinite_shape() {
        let q = query(&[1.0, 1.0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), 3.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(student_t_orthant(&q, &mut rng, 1e-4).is_err());
    }
}
