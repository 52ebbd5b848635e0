//! Fully adapted auxiliary particle filter over firing histories.
//!
//! Each particle carries the conjugate statistics of the twitch parameters and,
//! per unit, a shared handle to the excitability grid implied by that unit's
//! firing history. Particles are reference counted so that resampled copies
//! and children with identical transitions share storage.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combo::ComboTable;
use crate::error::{MuneError, Result};
use crate::grid::{GridCache, GridEntry, HistoryKey, Lattice, StimulusFactors};
use crate::model::{ExcitabilityCurve, Record, StimulusResponseSeries};
use crate::obs::{set_nu_prior, BaselineStats, FiringVector, Hyperparameters, UnitStats};
use crate::resample::residual_systematic_resample_with;
use crate::special::log_sum_exp;

/// Combo tables kept between weighting and propagation, in table entries.
const TABLE_BUDGET: usize = 1 << 23;

/// Settings of a single filter run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub hyper: Hyperparameters,
    pub curve: ExcitabilityCurve,
    /// Upper bound on the median threshold; `None` uses 1.1 times the supramaximal stimulus.
    pub eta_max: Option<f64>,
    pub lambda_max: f64,
    pub n_particles: usize,
    pub grid_n: usize,
    pub prune_threshold: f64,
    pub seed: u64,
    /// Disabling the grid cache recomputes every grid; results are unchanged.
    #[serde(default = "default_true")]
    pub cache_enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            hyper: Hyperparameters::default(),
            curve: ExcitabilityCurve::LogLogistic,
            eta_max: None,
            lambda_max: 14.0,
            n_particles: 5000,
            grid_n: 30,
            prune_threshold: 0.0,
            seed: 0,
            cache_enabled: true,
        }
    }
}

impl SmcConfig {
    pub fn eta_max_for(&self, series: &StimulusResponseSeries) -> f64 {
        self.eta_max.unwrap_or(1.1 * series.supramaximal().stimulus)
    }

    pub fn validate(&self, u: usize) -> Result<()> {
        self.hyper.validate()?;
        if u == 0 || u > FiringVector::MAX_UNITS {
            return Err(MuneError::validation(format!("unit count {u} outside 1..={}", FiringVector::MAX_UNITS)));
        }
        if self.n_particles == 0 {
            return Err(MuneError::validation("at least one particle is required"));
        }
        if self.grid_n < 2 {
            return Err(MuneError::validation("grid needs at least 2 vertices per dimension"));
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return Err(MuneError::validation("lambda_max must be positive"));
        }
        if let Some(e) = self.eta_max {
            if !(e > 0.0 && e.is_finite()) {
                return Err(MuneError::validation("eta_max must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(MuneError::validation("prune_threshold must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One hypothesis about the firing history of all units.
#[derive(Debug)]
pub struct Particle {
    units: Vec<Arc<GridEntry>>,
    stats: UnitStats,
}

impl Particle {
    pub fn new(units: Vec<Arc<GridEntry>>, stats: UnitStats) -> Result<Self> {
        if units.len() != stats.units() {
            return Err(MuneError::validation("one grid per unit is required"));
        }
        if units.windows(2).any(|w| w[0].key().len() != w[1].key().len()) {
            return Err(MuneError::validation("unit histories must have equal length"));
        }
        Ok(Particle { units, stats })
    }

    pub fn stats(&self) -> &UnitStats {
        &self.stats
    }

    pub fn units(&self) -> &[Arc<GridEntry>] {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn history_keys(&self) -> Vec<&HistoryKey> {
        self.units.iter().map(|e| e.key()).collect()
    }

    /// Firing vector recorded at position `t` of the histories.
    pub fn firing_at(&self, t: usize) -> FiringVector {
        let bools: Vec<bool> = self.units.iter().map(|e| e.key().get(t)).collect();
        FiringVector::from_bools(&bools)
    }

    /// Firing predictive of every unit at the stimulus behind `factors`.
    pub fn predictives(&self, factors: &StimulusFactors) -> Result<Vec<f64>> {
        self.units.iter().map(|e| e.fire_predictive(factors)).collect()
    }
}

/// Per-step filter diagnostics; timings are excluded from equality.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Effective sample size of the normalized weights at each weighted step.
    pub ess: Vec<f64>,
    pub unique_particles: Vec<usize>,
    pub cache_sizes: Vec<usize>,
    /// Log-ML contribution of each non-baseline observation, supramaximal first.
    #[serde(with = "crate::serde_ext::floats")]
    pub increments: Vec<f64>,
    pub grid_updates: usize,
    /// Record index at which every particle reached zero weight.
    pub annihilated_at: Option<usize>,
    #[serde(skip)]
    pub elapsed_ms: f64,
}

impl PartialEq for Diagnostics {
    fn eq(&self, o: &Self) -> bool {
        self.ess == o.ess
            && self.unique_particles == o.unique_particles
            && self.cache_sizes == o.cache_sizes
            && self.increments.len() == o.increments.len()
            && self.increments.iter().zip(&o.increments).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.grid_updates == o.grid_updates
            && self.annihilated_at == o.annihilated_at
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub u: usize,
    pub log_ml: f64,
    pub particles: Vec<Arc<Particle>>,
    pub baseline: BaselineStats,
    pub baseline_log_ml: f64,
    pub nu_prior_b: f64,
    pub lattice: Arc<Lattice>,
    pub config: SmcConfig,
    pub diagnostics: Diagnostics,
}

impl RunResult {
    /// Distinct particle states with their multiplicities, in population order.
    pub fn unique_particles(&self) -> Vec<(Arc<Particle>, usize)> {
        dedupe(&self.particles)
    }
}

/// Baseline statistics after the zero-stimulus records and the log evidence they contribute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselinePhase {
    pub stats: BaselineStats,
    pub log_ml: f64,
}

/// Folds the baseline update over records `1..tau`.
pub fn assimilate_baseline_phase(series: &StimulusResponseSeries, hyper: &Hyperparameters) -> Result<BaselinePhase> {
    let mut stats = BaselineStats::prior(hyper);
    let mut log_ml = 0.0;
    for r in series.baseline() {
        log_ml += stats.ln_predictive(r.response);
        stats = stats.update(r.response)?;
    }
    Ok(BaselinePhase { stats, log_ml })
}

/// Installs the twitch prior and assimilates the supramaximal record with every unit firing.
///
/// Returns the single resulting particle and the log evidence increment.
pub fn assimilate_supramaximal(
    u: usize,
    baseline: &BaselineStats,
    record: Record,
    nu_prior_b: f64,
    hyper: &Hyperparameters,
    cache: &mut GridCache,
) -> Result<(Arc<Particle>, f64)> {
    let prior = UnitStats::prior(u, nu_prior_b, hyper)?;
    let x = FiringVector::ones(u);
    let factors = cache.lattice().stimulus_factors(cache.curve(), record.stimulus);
    let root = cache.root();
    let p = root.fire_predictive(&factors)?;
    let increment = prior.ln_predictive(record.response, x, baseline.m) + u as f64 * p.ln();
    let fired = cache.extend(&root, true, &factors)?;
    let stats = prior.update(x, record.response, baseline.m)?;
    let particle = Particle::new(vec![fired; u], stats)?;
    Ok((Arc::new(particle), increment))
}

/// Child of `parent` after observing `y` with firing vector `x`; grids must already be extended.
pub fn propagate(
    parent: &Particle,
    x: FiringVector,
    y: f64,
    baseline: &BaselineStats,
    units: Vec<Arc<GridEntry>>,
) -> Result<Particle> {
    let stats = if x.is_zero() { parent.stats.clone() } else { parent.stats.update(x, y, baseline.m)? };
    Particle::new(units, stats)
}

fn dedupe(population: &[Arc<Particle>]) -> Vec<(Arc<Particle>, usize)> {
    let mut index: HashMap<*const Particle, usize> = HashMap::new();
    let mut out: Vec<(Arc<Particle>, usize)> = Vec::new();
    for p in population {
        match index.get(&Arc::as_ptr(p)) {
            Some(&i) => out[i].1 += 1,
            None => {
                index.insert(Arc::as_ptr(p), out.len());
                out.push((Arc::clone(p), 1));
            }
        }
    }
    out
}

/// Outcome of weighting a population at one observation.
struct Weighted {
    parents: Vec<Arc<Particle>>,
    /// Unique-parent index of each population member.
    member: Vec<usize>,
    log_weights: Vec<f64>,
    tables: Vec<Option<ComboTable>>,
}

fn weigh(
    population: &[Arc<Particle>],
    baseline: &BaselineStats,
    y: f64,
    factors: &StimulusFactors,
    prune_threshold: f64,
) -> Result<Weighted> {
    let mut index: HashMap<*const Particle, usize> = HashMap::new();
    let mut parents = Vec::new();
    let member: Vec<usize> = population
        .iter()
        .map(|p| {
            *index.entry(Arc::as_ptr(p)).or_insert_with(|| {
                parents.push(Arc::clone(p));
                parents.len() - 1
            })
        })
        .collect();
    let u = population[0].unit_count();
    let keep = parents.len().saturating_mul(1 << u) <= TABLE_BUDGET;
    let results: Vec<Result<(f64, Option<ComboTable>)>> = parents
        .par_iter()
        .map(|p| {
            let table = ComboTable::build(&p.stats, baseline, y, &p.predictives(factors)?, prune_threshold)?;
            Ok((table.log_weight(), keep.then_some(table)))
        })
        .collect();
    let mut log_weights = Vec::with_capacity(parents.len());
    let mut tables = Vec::with_capacity(parents.len());
    for r in results {
        let (lw, t) = r?;
        log_weights.push(lw);
        tables.push(t);
    }
    Ok(Weighted { parents, member, log_weights, tables })
}

/// Mutable filter state between observations.
struct Filter<'a> {
    config: &'a SmcConfig,
    baseline: BaselineStats,
    cache: GridCache,
    population: Vec<Arc<Particle>>,
    diagnostics: Diagnostics,
}

impl Filter<'_> {
    /// Weights, resamples and propagates; returns the log evidence increment.
    fn step(&mut self, t: usize, record: Record) -> Result<f64> {
        let n = self.config.n_particles;
        let factors = self.cache.lattice().stimulus_factors(self.cache.curve(), record.stimulus);
        let w = weigh(&self.population, &self.baseline, record.response, &factors, self.config.prune_threshold)?;

        let mut counts = vec![0usize; w.parents.len()];
        w.member.iter().for_each(|&k| counts[k] += 1);
        let terms: Vec<f64> = counts.iter().zip(&w.log_weights).map(|(&c, lw)| (c as f64).ln() + lw).collect();
        let log_total = log_sum_exp(&terms);
        self.diagnostics.unique_particles.push(w.parents.len());
        if log_total == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let increment = log_total - (n as f64).ln();

        let weights: Vec<f64> = w.member.iter().map(|&k| (w.log_weights[k] - log_total).exp()).collect();
        let sum_sq: f64 = weights.iter().map(|v| v * v).sum();
        self.diagnostics.ess.push(1.0 / sum_sq);
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MuneError::numerical(format!("normalized weights sum to {total}")));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(t as u64);
        let offset: f64 = rng.random();
        let ancestors = residual_systematic_resample_with(&weights, n, offset)?;
        let uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

        // group child slots by unique parent and sample each parent's table once
        let mut slots: Vec<Vec<usize>> = vec![Vec::new(); w.parents.len()];
        for (slot, &a) in ancestors.iter().enumerate() {
            slots[w.member[a]].push(slot);
        }
        let sampled: Vec<Result<Vec<(usize, FiringVector)>>> = (0..w.parents.len())
            .into_par_iter()
            .filter(|&k| !slots[k].is_empty())
            .map(|k| {
                let mut order = slots[k].clone();
                order.sort_by(|&a, &b| uniforms[a].total_cmp(&uniforms[b]).then(a.cmp(&b)));
                let sorted: Vec<f64> = order.iter().map(|&s| uniforms[s]).collect();
                let draws = match &w.tables[k] {
                    Some(table) => table.sample_sorted(&sorted)?,
                    None => {
                        let p = &w.parents[k];
                        ComboTable::build(
                            &p.stats,
                            &self.baseline,
                            record.response,
                            &p.predictives(&factors)?,
                            self.config.prune_threshold,
                        )?
                        .sample_sorted(&sorted)?
                    }
                };
                Ok(order.into_iter().zip(draws).collect())
            })
            .collect();
        let mut slot_parent = vec![(0usize, FiringVector::zeros(1)); n];
        for r in sampled {
            for (slot, x) in r? {
                slot_parent[slot] = (w.member[ancestors[slot]], x);
            }
        }
        drop(w.tables);

        // unique (parent, firing vector) transitions in slot order
        let mut child_index: HashMap<(usize, u32), usize> = HashMap::new();
        let mut transitions: Vec<(usize, FiringVector)> = Vec::new();
        let slot_child: Vec<usize> = slot_parent
            .iter()
            .map(|&(k, x)| {
                *child_index.entry((k, x.bits())).or_insert_with(|| {
                    transitions.push((k, x));
                    transitions.len() - 1
                })
            })
            .collect();

        let requests: Vec<(Arc<GridEntry>, bool)> = transitions
            .iter()
            .flat_map(|&(k, x)| {
                let parent = &w.parents[k];
                (0..x.units()).map(move |j| (Arc::clone(&parent.units[j]), x.get(j)))
            })
            .collect();
        let grids = self.cache.extend_many(&requests, &factors)?;
        let u = self.population[0].unit_count();

        let children: Vec<Result<Arc<Particle>>> = transitions
            .par_iter()
            .enumerate()
            .map(|(c, &(k, x))| {
                let units = grids[c * u..(c + 1) * u].to_vec();
                propagate(&w.parents[k], x, record.response, &self.baseline, units).map(Arc::new)
            })
            .collect();
        let children: Vec<Arc<Particle>> = children.into_iter().collect::<Result<_>>()?;
        drop(grids);
        drop(requests);

        self.population = slot_child.iter().map(|&c| Arc::clone(&children[c])).collect();
        drop(children);
        drop(w.parents);
        self.cache.evict_unreferenced();
        self.diagnostics.cache_sizes.push(self.cache.len());
        Ok(increment)
    }
}

/// Runs the filter for a model with `u` units.
///
/// A run whose particles all reach zero weight reports `log_ml = -inf` and the
/// offending record in the diagnostics.
pub fn smc_run(series: &StimulusResponseSeries, u: usize, config: &SmcConfig) -> Result<RunResult> {
    config.validate(u)?;
    let start = Instant::now();
    let hyper = &config.hyper;
    let phase = assimilate_baseline_phase(series, hyper)?;
    let nu_prior_b = set_nu_prior(hyper.a0, hyper.delta, hyper.epsilon, &phase.stats)?;

    let lattice = Arc::new(Lattice::square(config.grid_n, config.eta_max_for(series), config.lambda_max)?);
    let mut cache = GridCache::new(Arc::clone(&lattice), config.curve);
    cache.set_enabled(config.cache_enabled);
    let (particle, increment) =
        assimilate_supramaximal(u, &phase.stats, series.supramaximal(), nu_prior_b, hyper, &mut cache)?;

    let mut diagnostics = Diagnostics { increments: vec![increment], ..Default::default() };
    let mut log_ml = phase.log_ml + increment;
    let mut filter = Filter {
        config,
        baseline: phase.stats,
        cache,
        population: vec![particle; config.n_particles],
        diagnostics: Diagnostics::default(),
    };
    std::mem::swap(&mut filter.diagnostics, &mut diagnostics);

    if log_ml == f64::NEG_INFINITY {
        filter.diagnostics.annihilated_at = Some(series.tau() - 1);
    } else {
        let tau = series.tau();
        for (offset, record) in series.tail().iter().enumerate() {
            let t = tau + offset;
            let increment = filter.step(t, *record)?;
            filter.diagnostics.increments.push(increment);
            log_ml += increment;
            if increment == f64::NEG_INFINITY {
                filter.diagnostics.annihilated_at = Some(t);
                break;
            }
        }
    }
    filter.diagnostics.grid_updates = filter.cache.updates_computed();
    filter.diagnostics.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    Ok(RunResult {
        u,
        log_ml,
        particles: filter.population,
        baseline: phase.stats,
        baseline_log_ml: phase.log_ml,
        nu_prior_b,
        lattice,
        config: config.clone(),
        diagnostics: filter.diagnostics,
    })
}
