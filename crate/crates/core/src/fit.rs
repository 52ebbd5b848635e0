//! Serializable snapshot of a finished run.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MuneError, Result};
use crate::grid::{GridCache, GridEntry, HistoryKey, Lattice};
use crate::model::StimulusResponseSeries;
use crate::obs::{BaselineStats, UnitStats};
use crate::postprocess::{posterior_mixture_summaries, ParameterReport};
use crate::smc::{Diagnostics, Particle, RunResult, SmcConfig};

/// A distinct particle state and how many population members share it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub multiplicity: usize,
    pub a: f64,
    pub b: f64,
    pub m: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    /// Firing history of each unit, supramaximal record first.
    pub histories: Vec<HistoryKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub u: usize,
    #[serde(with = "crate::serde_ext::float")]
    pub log_ml: f64,
    pub ess_trace: Vec<f64>,
    pub parameter_summaries: ParameterReport,
    pub baseline: BaselineStats,
    #[serde(with = "crate::serde_ext::float")]
    pub baseline_log_ml: f64,
    pub nu_prior_b: f64,
    pub config: SmcConfig,
    pub diagnostics: Diagnostics,
    pub particles: Vec<ParticleState>,
    pub series: StimulusResponseSeries,
}

impl FitResult {
    pub fn from_run(run: &RunResult, series: &StimulusResponseSeries) -> Result<Self> {
        let particles = run
            .unique_particles()
            .into_iter()
            .map(|(p, multiplicity)| {
                let s = p.stats();
                ParticleState {
                    multiplicity,
                    a: s.a,
                    b: s.b,
                    m: s.m.iter().copied().collect(),
                    c: (0..s.c.nrows()).map(|i| s.c.row(i).iter().copied().collect()).collect(),
                    histories: p.history_keys().into_iter().cloned().collect(),
                }
            })
            .collect();
        Ok(FitResult {
            u: run.u,
            log_ml: run.log_ml,
            ess_trace: run.diagnostics.ess.clone(),
            parameter_summaries: posterior_mixture_summaries(run)?,
            baseline: run.baseline,
            baseline_log_ml: run.baseline_log_ml,
            nu_prior_b: run.nu_prior_b,
            config: run.config.clone(),
            diagnostics: run.diagnostics.clone(),
            particles,
            series: series.clone(),
        })
    }

    /// Rebuilds the run, replaying each firing history through the lattice.
    pub fn restore(&self) -> Result<RunResult> {
        let series = &self.series;
        let lattice = Arc::new(Lattice::square(
            self.config.grid_n,
            self.config.eta_max_for(series),
            self.config.lambda_max,
        )?);
        let mut cache = GridCache::new(Arc::clone(&lattice), self.config.curve);
        let factors: Vec<_> =
            series.firing_phase().iter().map(|r| lattice.stimulus_factors(self.config.curve, r.stimulus)).collect();
        let mut built: HashMap<HistoryKey, Arc<GridEntry>> = HashMap::new();
        let mut population = Vec::new();
        for state in &self.particles {
            if state.histories.len() != self.u || state.m.len() != self.u || state.c.len() != self.u {
                return Err(MuneError::validation("particle state does not match the unit count"));
            }
            let mut units = Vec::with_capacity(self.u);
            for key in &state.histories {
                if key.len() > factors.len() {
                    return Err(MuneError::validation("firing history is longer than the series"));
                }
                let entry = match built.get(key) {
                    Some(e) => Arc::clone(e),
                    None => {
                        let mut e = cache.root();
                        for (t, bit) in key.iter().enumerate() {
                            e = cache.extend(&e, bit, &factors[t])?;
                        }
                        built.insert(key.clone(), Arc::clone(&e));
                        e
                    }
                };
                units.push(entry);
            }
            let stats = UnitStats {
                a: state.a,
                b: state.b,
                m: DVector::from_vec(state.m.clone()),
                c: DMatrix::from_fn(self.u, self.u, |i, k| state.c[i][k]),
            };
            let particle = Arc::new(Particle::new(units, stats)?);
            population.extend(std::iter::repeat_n(particle, state.multiplicity));
        }
        if population.is_empty() {
            return Err(MuneError::validation("fit result holds no particles"));
        }
        Ok(RunResult {
            u: self.u,
            log_ml: self.log_ml,
            particles: population,
            baseline: self.baseline,
            baseline_log_ml: self.baseline_log_ml,
            nu_prior_b: self.nu_prior_b,
            lattice,
            config: self.config.clone(),
            diagnostics: self.diagnostics.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Record;
    use crate::smc::smc_run;

    #[test]
    fn json_round_trip_restores_the_run() {
        let mut records: Vec<Record> = [0.1, -0.2, 0.05, 0.3, -0.1].iter().map(|&y| Record::new(0.0, y)).collect();
        records.push(Record::new(40.0, 61.0));
        records.extend([(15.0, 0.3), (20.0, 29.0), (24.0, 30.2), (30.0, 60.4)].map(|(s, y)| Record::new(s, y)));
        let series = StimulusResponseSeries::new(records, 6).unwrap();
        let run = smc_run(&series, 2, &SmcConfig { n_particles: 300, grid_n: 15, seed: 2, ..Default::default() }).unwrap();
        let fit = FitResult::from_run(&run, &series).unwrap();
        let text = serde_json::to_string(&fit).unwrap();
        let back: FitResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back, fit);
        let restored = back.restore().unwrap();
        assert_eq!(restored.particles.len(), run.particles.len());
        for ((a, ca), (b, cb)) in run.unique_particles().iter().zip(restored.unique_particles()) {
            assert_eq!(*ca, cb);
            assert_eq!(a.stats(), b.stats());
            for (ga, gb) in a.units().iter().zip(b.units()) {
                assert_eq!(ga.grid().log_values(), gb.grid().log_values());
            }
        }
        assert_eq!(FitResult::from_run(&restored, &series).unwrap(), fit);
    }
}
