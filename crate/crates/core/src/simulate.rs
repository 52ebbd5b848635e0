//! Synthetic motor unit systems and stimulus-response experiments.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MuneError, Result};
use crate::model::{ExcitabilityCurve, Record, StimulusResponseSeries};
use crate::special::normal_quantile;

const MAX_ATTEMPTS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueUnit {
    pub eta: f64,
    pub lambda: f64,
    pub mu: f64,
}

/// Generating parameters of a synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueSystem {
    pub u_star: usize,
    pub units: Vec<TrueUnit>,
    pub nu_inv: f64,
    pub mu_bar: f64,
    pub nu_bar_inv: f64,
}

impl TrueSystem {
    pub fn new(units: Vec<TrueUnit>, nu_inv: f64) -> Result<Self> {
        if units.is_empty() {
            return Err(MuneError::validation("a system needs at least one unit"));
        }
        if !(nu_inv > 0.0) || units.iter().any(|u| !(u.eta > 0.0 && u.lambda > 0.0 && u.mu.is_finite())) {
            return Err(MuneError::validation("unit parameters must be positive and finite"));
        }
        Ok(TrueSystem { u_star: units.len(), units, nu_inv, mu_bar: 0.0, nu_bar_inv: 0.25 * 0.25 })
    }

    /// Threshold spacing above 2 V, eta-adjacent twitch forces more than 4 mN apart,
    /// every force above 20 mN and every lambda below 10 V.
    pub fn satisfies_constraints(&self) -> bool {
        let mut sorted = self.units.clone();
        sorted.sort_by(|a, b| a.eta.total_cmp(&b.eta));
        sorted.iter().all(|u| u.mu > 20.0 && u.lambda < 10.0)
            && sorted.windows(2).all(|w| w[1].eta - w[0].eta > 2.0 && (w[1].mu - w[0].mu).abs() > 4.0)
    }
}

/// Draws a system by rejection until the spacing constraints hold.
pub fn simulate_params<R: Rng + ?Sized>(u_star: usize, rng: &mut R) -> Result<TrueSystem> {
    if u_star == 0 {
        return Err(MuneError::validation("u_star must be at least 1"));
    }
    let lambda_law = Gamma::new(2.0, 8.0).expect("valid gamma parameters");
    let mu_law = Normal::new(40.0, 20.0).expect("valid normal parameters");
    for _ in 0..MAX_ATTEMPTS {
        let units: Vec<TrueUnit> = (0..u_star)
            .map(|_| TrueUnit {
                eta: rng.random_range(5.0..40.0),
                lambda: truncated(rng, &lambda_law, |v| v > 0.0 && v < 10.0),
                mu: truncated(rng, &mu_law, |v| v > 20.0),
            })
            .collect();
        let nu_inv = rng.random_range(1.0..5.0);
        let sys = TrueSystem::new(units, nu_inv)?;
        if sys.satisfies_constraints() {
            return Ok(sys);
        }
    }
    Err(MuneError::ResourceCap(format!(
        "no system with {u_star} units met the spacing constraints in {MAX_ATTEMPTS} attempts"
    )))
}

fn truncated<R: Rng + ?Sized, D: Distribution<f64>>(rng: &mut R, law: &D, keep: impl Fn(f64) -> bool) -> f64 {
    loop {
        let v = law.sample(rng);
        if keep(v) {
            return v;
        }
    }
}

/// Stimulus schedule of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub baseline: usize,
    pub supramaximal: f64,
    /// Non-baseline stimuli other than the supramaximal one.
    pub stimuli: Vec<f64>,
    #[serde(default)]
    pub curve: ExcitabilityCurve,
}

impl Default for Design {
    /// 20 baseline records, a 40 V supramaximal stimulus and 199 stimuli evenly spaced over [5, 40] V.
    fn default() -> Self {
        Design::even(20, 40.0, 5.0, 40.0, 199)
    }
}

impl Design {
    pub fn even(baseline: usize, supramaximal: f64, lo: f64, hi: f64, count: usize) -> Self {
        let stimuli = match count {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
        };
        Design { baseline, supramaximal, stimuli, curve: ExcitabilityCurve::LogLogistic }
    }
}

/// A simulated experiment together with every latent draw behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub series: StimulusResponseSeries,
    /// `firing[t][j]`: whether unit `j` fired at record `t`.
    pub firing: Vec<Vec<bool>>,
    /// Baseline level plus noise at every record.
    pub baseline_draws: Vec<f64>,
    /// `twitch_draws[t][j]`: force unit `j` would add at record `t` if it fired.
    pub twitch_draws: Vec<Vec<f64>>,
}

impl SimulatedDataset {
    /// Recomputes each response from the latent draws.
    pub fn replay_responses(&self) -> Vec<f64> {
        responses(&self.baseline_draws, &self.firing, &self.twitch_draws)
    }
}

fn responses(baseline_draws: &[f64], firing: &[Vec<bool>], twitch_draws: &[Vec<f64>]) -> Vec<f64> {
    baseline_draws
        .iter()
        .zip(firing)
        .zip(twitch_draws)
        .map(|((b, x), z)| b + x.iter().zip(z).filter(|(f, _)| **f).map(|(_, v)| v).sum::<f64>())
        .collect()
}

pub fn simulate_dataset<R: Rng + ?Sized>(sys: &TrueSystem, design: &Design, rng: &mut R) -> Result<SimulatedDataset> {
    if design.baseline == 0 {
        return Err(MuneError::validation("the design needs at least one baseline record"));
    }
    if design.stimuli.iter().any(|s| !(*s >= 0.0 && *s <= design.supramaximal)) {
        return Err(MuneError::validation("design stimuli must lie in [0, supramaximal]"));
    }
    let mut stimuli = design.stimuli.clone();
    stimuli.sort_by(f64::total_cmp);
    let schedule: Vec<f64> = std::iter::repeat_n(0.0, design.baseline)
        .chain([design.supramaximal])
        .chain(stimuli)
        .collect();
    let tau = design.baseline + 1;

    let noise = Normal::new(sys.mu_bar, sys.nu_bar_inv.sqrt()).map_err(|e| MuneError::validation(e.to_string()))?;
    let twitch: Vec<Normal<f64>> = sys
        .units
        .iter()
        .map(|u| Normal::new(u.mu, sys.nu_inv.sqrt()).map_err(|e| MuneError::validation(e.to_string())))
        .collect::<Result<_>>()?;

    let mut firing = Vec::with_capacity(schedule.len());
    let mut baseline_draws = Vec::with_capacity(schedule.len());
    let mut twitch_draws = Vec::with_capacity(schedule.len());
    for (t, &s) in schedule.iter().enumerate() {
        let x: Vec<bool> = sys
            .units
            .iter()
            .map(|u| {
                if t + 1 < tau {
                    false
                } else if t + 1 == tau {
                    true
                } else {
                    rng.random::<f64>() < design.curve.prob(s, u.eta, u.lambda)
                }
            })
            .collect();
        baseline_draws.push(noise.sample(rng));
        twitch_draws.push(twitch.iter().map(|d| d.sample(rng)).collect());
        firing.push(x);
    }
    let records = schedule
        .iter()
        .zip(responses(&baseline_draws, &firing, &twitch_draws))
        .map(|(&s, y)| Record::new(s, y))
        .collect();
    let series = StimulusResponseSeries::new(records, tau)?;
    Ok(SimulatedDataset { series, firing, baseline_draws, twitch_draws })
}

/// Stimulus at which the curve reaches probability `p`.
pub fn stimulus_at_prob(curve: ExcitabilityCurve, p: f64, eta: f64, lambda: f64) -> f64 {
    match curve {
        ExcitabilityCurve::LogLogistic => eta * (p / (1.0 - p)).powf(lambda / (4.0 * eta)),
        ExcitabilityCurve::GaussianCdf => {
            (eta + normal_quantile(p) * lambda / (2.0 * std::f64::consts::PI).sqrt()).max(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alternation {
    pub present: bool,
    /// Stimulus intervals where at least two units fire with probability in (0.05, 0.95).
    pub intervals: Vec<(f64, f64)>,
}

pub fn detect_alternation(sys: &TrueSystem, curve: ExcitabilityCurve) -> Alternation {
    let mut events: Vec<(f64, i32)> = sys
        .units
        .iter()
        .flat_map(|u| {
            [(stimulus_at_prob(curve, 0.05, u.eta, u.lambda), 1), (stimulus_at_prob(curve, 0.95, u.eta, u.lambda), -1)]
        })
        .collect();
    // closing events sort first so touching intervals do not count as overlap
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut intervals = Vec::new();
    let mut open = 0;
    let mut start = 0.0;
    for (s, delta) in events {
        let before = open;
        open += delta;
        if before < 2 && open >= 2 {
            start = s;
        } else if before >= 2 && open < 2 && s > start {
            intervals.push((start, s));
        }
    }
    Alternation { present: !intervals.is_empty(), intervals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_unit_is_always_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = simulate_params(1, &mut rng).unwrap();
        assert_eq!(sys.u_star, 1);
        assert!(sys.satisfies_constraints());
        assert!(simulate_params(0, &mut rng).is_err());
    }

    #[test]
    fn truncated_lambda_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let law = Gamma::new(2.0, 8.0).unwrap();
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| truncated(&mut rng, &law, |v| v > 0.0 && v < 10.0)).sum::<f64>() / n as f64;
        assert!(mean > 3.5 && mean < 6.5, "{mean}");
    }

    #[test]
    fn infeasible_system_hits_the_cap() {
        // twenty thresholds more than 2 V apart cannot fit into a 35 V window
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(simulate_params(20, &mut rng), Err(MuneError::ResourceCap(_))));
    }

    #[test]
    fn default_design_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = simulate_params(3, &mut rng).unwrap();
        let data = simulate_dataset(&sys, &Design::default(), &mut rng).unwrap();
        assert_eq!(data.series.len(), 220);
        assert_eq!(data.series.tau(), 21);
        assert!(data.firing[20].iter().all(|&f| f));
        assert!(data.firing[..20].iter().flatten().all(|&f| !f));
        for (r, y) in data.series.records().iter().zip(data.replay_responses()) {
            assert_eq!(r.response, y);
        }
    }

    #[test]
    fn baseline_variance_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = simulate_params(2, &mut rng).unwrap();
        let design = Design { baseline: 10_000, ..Design::default() };
        let data = simulate_dataset(&sys, &design, &mut rng).unwrap();
        let ys: Vec<f64> = data.series.baseline().iter().map(|r| r.response).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
        assert!((var / 0.0625 - 1.0).abs() < 0.05, "{var}");
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn supramaximal_mean_is_the_total_force() {
        let sys = TrueSystem::new(
            vec![TrueUnit { eta: 10.0, lambda: 2.0, mu: 30.0 }, TrueUnit { eta: 20.0, lambda: 3.0, mu: 45.0 }],
            2.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let design = Design::even(1, 40.0, 5.0, 40.0, 0);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| simulate_dataset(&sys, &design, &mut rng).unwrap().series.supramaximal().response)
            .sum::<f64>()
            / n as f64;
        // sd of one draw is sqrt(2 * 2 + 0.0625) ~ 2.0
        assert!((mean - 75.0).abs() < 3.0 * 2.02 / (n as f64).sqrt());
    }

    #[test]
    fn firing_frequency_matches_the_curve() {
        let unit = TrueUnit { eta: 20.0, lambda: 4.0, mu: 30.0 };
        let sys = TrueSystem::new(vec![unit], 2.0).unwrap();
        let design = Design { baseline: 1, supramaximal: 40.0, stimuli: vec![19.0], curve: ExcitabilityCurve::LogLogistic };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let fired = (0..n).filter(|_| simulate_dataset(&sys, &design, &mut rng).unwrap().firing[2][0]).count();
        let p = ExcitabilityCurve::LogLogistic.prob(19.0, 20.0, 4.0);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((fired as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn alternation_examples() {
        let a = TrueUnit { eta: 20.0, lambda: 3.0, mu: 30.0 };
        let one = TrueSystem::new(vec![a], 1.0).unwrap();
        assert!(!detect_alternation(&one, ExcitabilityCurve::LogLogistic).present);
        let twins = TrueSystem::new(vec![a, a], 1.0).unwrap();
        let alt = detect_alternation(&twins, ExcitabilityCurve::LogLogistic);
        assert!(alt.present);
        let (lo, hi) = alt.intervals[0];
        let curve = ExcitabilityCurve::LogLogistic;
        assert!((curve.prob(lo, 20.0, 3.0) - 0.05).abs() < 1e-12);
        assert!((curve.prob(hi, 20.0, 3.0) - 0.95).abs() < 1e-12);
        let far = TrueSystem::new(vec![a, TrueUnit { eta: 35.0, lambda: 1.0, mu: 40.0 }], 1.0).unwrap();
        assert!(!detect_alternation(&far, curve).present);
    }

    #[test]
    fn alternation_is_common_in_generated_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut hits = 0;
        for i in 0..500 {
            let sys = simulate_params(1 + i % 10, &mut rng).unwrap();
            hits += detect_alternation(&sys, ExcitabilityCurve::LogLogistic).present as usize;
        }
        let frac = hits as f64 / 500.0;
        assert!(frac > 0.6 && frac < 0.95, "{frac}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn generated_systems_satisfy_constraints(u in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = simulate_params(u, &mut rng).unwrap();
            prop_assert!(sys.satisfies_constraints());
            let data = simulate_dataset(&sys, &Design::default(), &mut rng).unwrap();
            prop_assert!(StimulusResponseSeries::new(data.series.records().to_vec(), data.series.tau()).is_ok());
        }
    }
}
