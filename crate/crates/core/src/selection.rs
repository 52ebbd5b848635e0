//! Evidence comparison across unit counts with a run-to-run stability protocol.
//!
//! For every candidate `u` the filter is rerun with independent seeds. Unstable
//! estimates (a wide spread between runs) trigger more particles; stable ones
//! are checked against a finer lattice. The protocol alternates between the two
//! checks until both pass or a resource cap is hit, then averages the final runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MuneError, Result};
use crate::model::{ln_model_prior, StimulusResponseSeries};
use crate::postprocess::{recalibrate_log_ml, DEFAULT_MU_MIN, DEFAULT_ORTHANT_SE};
use crate::smc::{smc_run, SmcConfig};
use crate::special::{log_sum_exp, mix_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub runs_screen: usize,
    pub ml_range_tol: f64,
    pub particle_step: usize,
    pub grid_step: usize,
    pub runs_final: usize,
    pub prob_floor: f64,
    pub max_particles: usize,
    pub max_grid: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            runs_screen: 3,
            ml_range_tol: 1.0,
            particle_step: 5000,
            grid_step: 10,
            runs_final: 10,
            prob_floor: 0.01,
            max_particles: 200_000,
            max_grid: 120,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs_screen < 2 || self.runs_final < self.runs_screen {
            return Err(MuneError::validation("need runs_final >= runs_screen >= 2"));
        }
        if !(self.ml_range_tol > 0.0) || self.particle_step == 0 || self.grid_step == 0 {
            return Err(MuneError::validation("stability tolerances and steps must be positive"));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(MuneError::validation("prob_floor must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub smc: SmcConfig,
    pub stability: StabilityConfig,
    pub u_max: usize,
    #[serde(with = "crate::serde_ext::float")]
    pub mu_min: f64,
    pub orthant_se: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            smc: SmcConfig::default(),
            stability: StabilityConfig::default(),
            u_max: 12,
            mu_min: DEFAULT_MU_MIN,
            orthant_se: DEFAULT_ORTHANT_SE,
        }
    }
}

/// One batch of runs at fixed resources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub stage: Stage,
    pub particles: usize,
    pub grid: usize,
    #[serde(with = "crate::serde_ext::floats")]
    pub log_ml: Vec<f64>,
    #[serde(with = "crate::serde_ext::float")]
    pub range: f64,
    pub provisional_probability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Screen,
    GridCheck,
    Final,
}

/// Outcome of the stability protocol for one `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub u: usize,
    #[serde(with = "crate::serde_ext::float")]
    pub log_ml: f64,
    #[serde(with = "crate::serde_ext::float")]
    pub adjusted_log_ml: f64,
    #[serde(with = "crate::serde_ext::floats")]
    pub log_ml_runs: Vec<f64>,
    #[serde(with = "crate::serde_ext::floats")]
    pub adjusted_runs: Vec<f64>,
    pub particles_used: usize,
    pub grid_used: usize,
    /// Range of the first `runs_screen` final-resource runs.
    #[serde(with = "crate::serde_ext::float")]
    pub run_spread: f64,
    /// Standard error of the averaged log-ML.
    #[serde(with = "crate::serde_ext::float")]
    pub standard_error: f64,
    /// False when a resource cap stopped the escalation.
    pub stable: bool,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub models: Vec<ModelRecord>,
    /// Posterior probability of `u = 1..=u_max`.
    pub posterior: Vec<f64>,
    pub map_u: usize,
    pub hpcs: Vec<usize>,
    pub u_max: usize,
    #[serde(with = "crate::serde_ext::float")]
    pub mu_min: f64,
    pub seed: u64,
}

impl SelectionResult {
    pub fn probability_of(&self, u: usize) -> f64 {
        self.posterior.get(u.wrapping_sub(1)).copied().unwrap_or(0.0)
    }
}

/// Posterior over `u = 1..=u_max` from per-model log evidence.
pub fn model_posterior(log_evidence: &[f64], u_max: usize) -> Result<Vec<f64>> {
    let log_joint: Vec<f64> = log_evidence
        .iter()
        .enumerate()
        .map(|(i, le)| Ok(le + ln_model_prior(i + 1, u_max)?))
        .collect::<Result<_>>()?;
    let norm = log_sum_exp(&log_joint);
    if norm == f64::NEG_INFINITY || norm.is_nan() {
        return Err(MuneError::numerical("every model has zero evidence; selection failed"));
    }
    Ok(log_joint.iter().map(|v| (v - norm).exp()).collect())
}

/// Index (1-based `u`) of the largest probability; ties go to the smaller `u`.
pub fn map_model(posterior: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in posterior.iter().enumerate() {
        if *p > posterior[best] {
            best = i;
        }
    }
    best + 1
}

/// Smallest set of models with total probability at least `level`, built greedily.
pub fn hpcs(posterior: &[f64], level: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..posterior.len()).collect();
    order.sort_by(|&a, &b| posterior[b].total_cmp(&posterior[a]).then(a.cmp(&b)));
    let mut set = Vec::new();
    let mut total = 0.0;
    for i in order {
        set.push(i + 1);
        total += posterior[i];
        if total >= level - 1e-12 {
            break;
        }
    }
    set.sort_unstable();
    set
}

fn range(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        0.0
    } else {
        hi - lo
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.iter().all(|v| *v == f64::NEG_INFINITY) {
        return f64::NEG_INFINITY;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Protocol state of one candidate `u`.
struct Candidate {
    u: usize,
    particles: usize,
    grid: usize,
    stage: Stage,
    next_run: u64,
    /// Runs at the current resources: raw and recalibrated log-ML.
    raw: Vec<f64>,
    adjusted: Vec<f64>,
    /// Previous batch mean when a grid check is pending.
    coarse_mean: f64,
    stable: bool,
    trace: Vec<TraceEntry>,
    done: bool,
}

impl Candidate {
    fn batch(&self, s: &StabilityConfig) -> (usize, usize, usize) {
        match self.stage {
            Stage::Screen => (s.runs_screen, self.particles, self.grid),
            Stage::GridCheck => (s.runs_screen, self.particles, self.grid + s.grid_step),
            Stage::Final => (s.runs_final - self.raw.len(), self.particles, self.grid),
        }
    }

    /// Screening decision on the current batch.
    fn screen(&mut self, s: &StabilityConfig, probability: f64) {
        let spread = range(&self.raw);
        if spread > s.ml_range_tol && probability > s.prob_floor {
            if self.particles + s.particle_step > s.max_particles {
                self.stable = false;
                self.stage = Stage::Final;
            } else {
                self.particles += s.particle_step;
                self.raw.clear();
                self.adjusted.clear();
                self.stage = Stage::Screen;
            }
        } else if probability <= s.prob_floor {
            self.stage = Stage::Final;
        } else if self.grid + s.grid_step > s.max_grid {
            self.stable = false;
            self.stage = Stage::Final;
        } else {
            self.coarse_mean = mean(&self.raw);
            self.stage = Stage::GridCheck;
        }
    }

    fn advance(&mut self, s: &StabilityConfig, raw: Vec<f64>, adjusted: Vec<f64>, probability: f64) {
        match self.stage {
            Stage::Screen => {
                self.raw = raw;
                self.adjusted = adjusted;
                self.screen(s, probability);
            }
            Stage::GridCheck => {
                self.grid += s.grid_step;
                let shift = (mean(&raw) - self.coarse_mean).abs();
                let settled = range(&raw) < s.ml_range_tol && (shift < s.ml_range_tol || shift.is_nan());
                self.raw = raw;
                self.adjusted = adjusted;
                if settled {
                    self.stage = Stage::Final;
                } else {
                    self.screen(s, probability);
                }
            }
            Stage::Final => {
                self.raw.extend(raw);
                self.adjusted.extend(adjusted);
                self.done = true;
            }
        }
        if self.stage == Stage::Final && self.raw.len() >= s.runs_final {
            self.done = true;
        }
    }

    fn record(&self, s: &StabilityConfig) -> ModelRecord {
        let n = self.raw.len() as f64;
        let avg = mean(&self.raw);
        let sd = (self.raw.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        ModelRecord {
            u: self.u,
            log_ml: avg,
            adjusted_log_ml: mean(&self.adjusted),
            log_ml_runs: self.raw.clone(),
            adjusted_runs: self.adjusted.clone(),
            particles_used: self.particles,
            grid_used: self.grid,
            run_spread: range(&self.raw[..s.runs_screen.min(self.raw.len())]),
            standard_error: if avg.is_finite() { sd / n.sqrt() } else { f64::NAN },
            stable: self.stable,
            trace: self.trace.clone(),
        }
    }
}

/// Runs the protocol for the given candidates in synchronized rounds.
///
/// `provisional` decides whether escalation is gated by the provisional model
/// posterior; without it every candidate is treated as probable.
fn drive(
    series: &StimulusResponseSeries,
    units: &[usize],
    config: &SelectionConfig,
    provisional: bool,
) -> Result<Vec<ModelRecord>> {
    let s = &config.stability;
    s.validate()?;
    let mut candidates: Vec<Candidate> = units
        .iter()
        .map(|&u| Candidate {
            u,
            particles: config.smc.n_particles,
            grid: config.smc.grid_n,
            stage: Stage::Screen,
            next_run: 0,
            raw: Vec::new(),
            adjusted: Vec::new(),
            coarse_mean: f64::NAN,
            stable: true,
            trace: Vec::new(),
            done: false,
        })
        .collect();
    // latest batch mean of the adjusted evidence, by candidate
    let mut latest = vec![f64::NAN; candidates.len()];

    for round in 0.. {
        let jobs: Vec<(usize, u64, usize, usize)> = candidates
            .iter_mut()
            .enumerate()
            .filter(|(_, c)| !c.done)
            .flat_map(|(k, c)| {
                let (count, particles, grid) = c.batch(s);
                let first = c.next_run;
                c.next_run += count as u64;
                (0..count as u64).map(move |r| (k, first + r, particles, grid))
            })
            .collect();
        if jobs.is_empty() {
            break;
        }
        let results: Vec<Result<(usize, f64, f64)>> = jobs
            .par_iter()
            .map(|&(k, run, particles, grid)| {
                let u = candidates[k].u;
                let seed = mix_seed(config.smc.seed, u as u64, run);
                let cfg = SmcConfig { n_particles: particles, grid_n: grid, seed, ..config.smc.clone() };
                let result = smc_run(series, u, &cfg)?;
                let recal = recalibrate_log_ml(&result, config.mu_min, seed, config.orthant_se)?;
                Ok((k, result.log_ml, recal.adjusted_log_ml))
            })
            .collect();
        let mut raw: Vec<Vec<f64>> = vec![Vec::new(); candidates.len()];
        let mut adjusted: Vec<Vec<f64>> = vec![Vec::new(); candidates.len()];
        for r in results {
            let (k, lm, adj) = r?;
            raw[k].push(lm);
            adjusted[k].push(adj);
        }
        for (k, a) in adjusted.iter().enumerate() {
            if !a.is_empty() {
                latest[k] = mean(a);
            }
        }

        let probabilities: Vec<f64> = if provisional && latest.iter().all(|v| !v.is_nan()) {
            let mut full = vec![f64::NEG_INFINITY; config.u_max];
            for (c, v) in candidates.iter().zip(&latest) {
                full[c.u - 1] = *v;
            }
            match model_posterior(&full, config.u_max) {
                Ok(post) => candidates.iter().map(|c| post[c.u - 1]).collect(),
                Err(_) => vec![1.0; candidates.len()],
            }
        } else {
            vec![1.0; candidates.len()]
        };

        for (k, c) in candidates.iter_mut().enumerate() {
            if raw[k].is_empty() {
                continue;
            }
            let (_, particles, grid) = c.batch(s);
            c.trace.push(TraceEntry {
                round,
                stage: c.stage,
                particles,
                grid,
                log_ml: raw[k].clone(),
                range: range(&raw[k]),
                provisional_probability: probabilities[k],
            });
            c.advance(s, std::mem::take(&mut raw[k]), std::mem::take(&mut adjusted[k]), probabilities[k]);
        }
    }
    Ok(candidates.iter().map(|c| c.record(s)).collect())
}

/// Stability protocol for a single `u`, escalating whenever the spread is too wide.
pub fn run_with_stability(series: &StimulusResponseSeries, u: usize, config: &SelectionConfig) -> Result<ModelRecord> {
    Ok(drive(series, &[u], config, false)?.remove(0))
}

/// Compares `u = 1..=u_max` and reports the model posterior, MAP and 95% credible set.
pub fn select(series: &StimulusResponseSeries, config: &SelectionConfig) -> Result<SelectionResult> {
    if config.u_max == 0 {
        return Err(MuneError::validation("u_max must be at least 1"));
    }
    let units: Vec<usize> = (1..=config.u_max).collect();
    let models = drive(series, &units, config, true)?;
    let evidence: Vec<f64> = models.iter().map(|m| m.adjusted_log_ml).collect();
    let posterior = model_posterior(&evidence, config.u_max)?;
    Ok(SelectionResult {
        map_u: map_model(&posterior),
        hpcs: hpcs(&posterior, 0.95),
        posterior,
        models,
        u_max: config.u_max,
        mu_min: config.mu_min,
        seed: config.smc.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Record;
    use proptest::prelude::*;

    #[test]
    fn hpcs_examples() {
        assert_eq!(hpcs(&[0.97, 0.03], 0.95), vec![1]);
        assert_eq!(hpcs(&[0.5, 0.3, 0.2], 0.95), vec![1, 2, 3]);
        assert_eq!(hpcs(&[0.96, 0.04], 0.95), vec![1]);
        assert_eq!(hpcs(&[0.5, 0.5], 0.95), vec![1, 2]);
        let mut p = vec![0.0; 12];
        p[7] = 0.9995;
        p[6] = 0.0005;
        assert_eq!(map_model(&p), 8);
        assert_eq!(hpcs(&p, 0.95), vec![8]);
    }

    #[test]
    fn equal_evidence_favours_one_unit() {
        let post = model_posterior(&[-10.0; 6], 6).unwrap();
        assert_eq!(map_model(&post), 1);
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(model_posterior(&[f64::NEG_INFINITY; 3], 3).is_err());
        assert_eq!(map_model(&[0.4, 0.4, 0.2]), 1);
    }

    proptest! {
        #[test]
        fn posterior_properties(ev in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -1e3f64..1e3) {
            let n = ev.len();
            let post = model_posterior(&ev, n).unwrap();
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = ev.iter().map(|v| v + shift).collect();
            let post2 = model_posterior(&shifted, n).unwrap();
            for (a, b) in post.iter().zip(&post2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let set = hpcs(&post, 0.95);
            prop_assert!(set.contains(&map_model(&post)));
        }

        #[test]
        fn hpcs_shrinks_as_the_top_model_dominates(rest in proptest::collection::vec(0.01f64..1.0, 2..8), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let make = |top: f64| {
                let total: f64 = rest.iter().sum();
                let mut p: Vec<f64> = rest.iter().map(|r| r / total * (1.0 - top)).collect();
                p.insert(0, top);
                p
            };
            let (p_lo, p_hi) = (make(lo), make(hi));
            if map_model(&p_lo) == 1 && map_model(&p_hi) == 1 {
                prop_assert!(hpcs(&p_hi, 0.95).len() <= hpcs(&p_lo, 0.95).len());
            }
        }
    }

    fn baseline_only() -> StimulusResponseSeries {
        let mut records: Vec<Record> = [0.1, -0.2, 0.05, 0.3, -0.1].iter().map(|&y| Record::new(0.0, y)).collect();
        records.push(Record::new(40.0, 61.0));
        StimulusResponseSeries::new(records, 6).unwrap()
    }

    fn small_config() -> SelectionConfig {
        SelectionConfig {
            smc: SmcConfig { n_particles: 50, grid_n: 10, seed: 9, ..Default::default() },
            stability: StabilityConfig { particle_step: 50, max_particles: 200, max_grid: 40, ..Default::default() },
            u_max: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_toy_is_stable_at_first_screen() {
        let rec = run_with_stability(&baseline_only(), 2, &small_config()).unwrap();
        assert_eq!(rec.run_spread, 0.0);
        assert_eq!(rec.particles_used, 50);
        assert!(rec.stable);
        assert_eq!(rec.log_ml_runs.len(), 10);
        assert_eq!(rec.trace[0].stage, Stage::Screen);
        assert_eq!(rec.trace[1].stage, Stage::GridCheck);
        assert_eq!(rec.grid_used, 20);
    }

    #[test]
    fn selection_is_deterministic_and_monotone_in_resources() {
        let mut records: Vec<Record> = [0.1, -0.2, 0.05, 0.3, -0.1].iter().map(|&y| Record::new(0.0, y)).collect();
        records.push(Record::new(40.0, 61.0));
        records.extend([(15.0, 0.3), (20.0, 29.0), (22.0, 31.5), (24.0, 30.2), (30.0, 60.4), (35.0, 61.3)].map(|(s, y)| Record::new(s, y)));
        let series = StimulusResponseSeries::new(records, 6).unwrap();
        let cfg = small_config();
        let a = select(&series, &cfg).unwrap();
        let b = select(&series, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!((a.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.hpcs.contains(&a.map_u));
        for m in &a.models {
            assert!(m.trace.windows(2).all(|w| w[1].particles >= w[0].particles && w[1].grid >= w[0].grid));
            assert_eq!(m.log_ml_runs.len(), 10);
        }
    }
}
