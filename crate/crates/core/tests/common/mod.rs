#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smc_mune::simulate::{simulate_dataset, simulate_params, Design};
use smc_mune::StimulusResponseSeries;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Five baseline records, the supramaximal record and `tail` random stimuli in [10, 35] V.
pub fn small_instance(u: usize, tail: usize, seed: u64) -> StimulusResponseSeries {
    let mut r = rng(seed);
    let sys = simulate_params(u, &mut r).unwrap();
    let stimuli = (0..tail).map(|_| r.random_range(10.0..35.0)).collect();
    let design = Design { stimuli, ..Design::even(5, 40.0, 0.0, 0.0, 0) };
    simulate_dataset(&sys, &design, &mut r).unwrap().series
}

/// Gaussian-gamma posterior of the baseline computed from all responses at once.
pub fn batch_baseline(a0: f64, b0: f64, m0: f64, c0: f64, ys: &[f64]) -> (f64, f64, f64, f64) {
    let n = ys.len() as f64;
    let c = 1.0 / (1.0 / c0 + n);
    let m = c * (m0 / c0 + ys.iter().sum::<f64>());
    let ss: f64 = ys.iter().map(|y| (y - m) * (y - m)).sum();
    (a0 + n / 2.0, b0 + 0.5 * (ss + (m - m0) * (m - m0) / c0), m, c)
}

/// Weighted regression posterior for `y = m_bar + x'mu + e`, `e ~ N(0, |x| / nu)`,
/// `mu | nu ~ N(m0, C0 / nu)`, `nu ~ Gam(a0, b0)`.
pub fn batch_units(
    a0: f64,
    b0: f64,
    m0: &DVector<f64>,
    c0: &DMatrix<f64>,
    m_bar: f64,
    rows: &[(Vec<bool>, f64)],
) -> (f64, f64, DVector<f64>, DMatrix<f64>) {
    let u = m0.len();
    let p0 = c0.clone().try_inverse().unwrap();
    let mut precision = p0.clone();
    let mut rhs = &p0 * m0;
    for (x, y) in rows {
        let xv = DVector::from_iterator(u, x.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        let w = 1.0 / x.iter().filter(|&&b| b).count() as f64;
        precision += &xv * xv.transpose() * w;
        rhs += &xv * ((y - m_bar) * w);
    }
    let c = precision.cholesky().unwrap().inverse();
    let m = &c * rhs;
    let mut ss = 0.0;
    for (x, y) in rows {
        let fit: f64 = x.iter().zip(m.iter()).filter(|(b, _)| **b).map(|(_, v)| v).sum();
        let w = 1.0 / x.iter().filter(|&&b| b).count() as f64;
        ss += w * (y - m_bar - fit).powi(2);
    }
    let d = &m - m0;
    let prior_term = (d.transpose() * &p0 * &d)[(0, 0)];
    (a0 + rows.len() as f64 / 2.0, b0 + 0.5 * (ss + prior_term), m, c)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_813,
    0.949_107_912_342_759,
    0.864_864_423_359_769,
    0.741_531_185_599_394,
    0.586_087_235_467_691,
    0.405_845_151_377_397,
    0.207_784_955_007_898,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529,
    0.063_092_092_629_979,
    0.104_790_010_322_250,
    0.140_653_259_715_525,
    0.169_004_726_639_267,
    0.190_350_578_064_785,
    0.204_432_940_075_298,
    0.209_482_141_084_728,
];
const G_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_870,
    0.279_705_391_489_277,
    0.381_830_050_505_119,
    0.417_959_183_673_469,
];

fn kronrod(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WEIGHTS[7] * fc;
    let mut g = G_WEIGHTS[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        k += GK_WEIGHTS[i] * s;
        if i % 2 == 1 {
            g += G_WEIGHTS[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7, 15) quadrature to absolute tolerance `tol`.
pub fn adaptive(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn go(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = kronrod(f, a, b);
        if err <= tol || depth >= 40 {
            return v;
        }
        let m = 0.5 * (a + b);
        go(f, a, m, tol / 2.0, depth + 1) + go(f, m, b, tol / 2.0, depth + 1)
    }
    go(&mut f, a, b, tol, 0)
}
