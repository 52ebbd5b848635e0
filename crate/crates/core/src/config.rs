//! Flat key-value configuration files.
//!
//! Every key is optional and overrides the built-in default; unknown keys are
//! rejected so that a misspelt hyperparameter cannot be silently ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MuneError, Result};
use crate::model::ExcitabilityCurve;
use crate::selection::SelectionConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub a_bar0: Option<f64>,
    pub b_bar0: Option<f64>,
    pub m_bar0: Option<f64>,
    pub c_bar0: Option<f64>,
    pub m0: Option<f64>,
    #[serde(rename = "C0_scale")]
    pub c0_scale: Option<f64>,
    pub a0: Option<f64>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,

    pub u_max: Option<usize>,
    pub eta_max: Option<f64>,
    pub lambda_max: Option<f64>,
    pub mu_min: Option<f64>,
    pub n_particles: Option<usize>,
    pub grid_n: Option<usize>,
    pub prune_threshold: Option<f64>,
    pub seed: Option<u64>,
    pub curve: Option<ExcitabilityCurve>,
    pub orthant_se: Option<f64>,

    pub runs_screen: Option<usize>,
    pub ml_range_tol: Option<f64>,
    pub particle_step: Option<usize>,
    pub grid_step: Option<usize>,
    pub runs_final: Option<usize>,
    pub prob_floor: Option<f64>,
    pub max_particles: Option<usize>,
    pub max_grid: Option<usize>,

    pub threads: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MuneError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MuneError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            MuneError::Config(msg) => MuneError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults overridden by every key present in the file.
    pub fn apply(&self, base: &SelectionConfig) -> Result<SelectionConfig> {
        let mut c = base.clone();
        let h = &mut c.smc.hyper;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(a_bar0 => h.a_bar0, b_bar0 => h.b_bar0, m_bar0 => h.m_bar0, c_bar0 => h.c_bar0,
             m0 => h.m0, c0_scale => h.c0_scale, a0 => h.a0, delta => h.delta, epsilon => h.epsilon);
        let s = &mut c.smc;
        set!(lambda_max => s.lambda_max, n_particles => s.n_particles, grid_n => s.grid_n,
             prune_threshold => s.prune_threshold, seed => s.seed, curve => s.curve);
        if let Some(v) = self.eta_max {
            s.eta_max = Some(v);
        }
        let st = &mut c.stability;
        set!(runs_screen => st.runs_screen, ml_range_tol => st.ml_range_tol, particle_step => st.particle_step,
             grid_step => st.grid_step, runs_final => st.runs_final, prob_floor => st.prob_floor,
             max_particles => st.max_particles, max_grid => st.max_grid);
        set!(u_max => c.u_max, mu_min => c.mu_min, orthant_se => c.orthant_se);
        c.smc.hyper.validate()?;
        c.stability.validate().map_err(|e| MuneError::Config(e.to_string()))?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_defaults() {
        let f = ConfigFile::parse("a0 = 1.5\nC0_scale = 100.0\nu_max = 4\ncurve = \"gaussian_cdf\"\nmax_grid = 60\n").unwrap();
        let c = f.apply(&SelectionConfig::default()).unwrap();
        assert_eq!(c.smc.hyper.a0, 1.5);
        assert_eq!(c.smc.hyper.c0_scale, 100.0);
        assert_eq!(c.u_max, 4);
        assert_eq!(c.smc.curve, ExcitabilityCurve::GaussianCdf);
        assert_eq!(c.stability.max_grid, 60);
        assert_eq!(c.smc.n_particles, 5000);
        assert_eq!(c.mu_min, 15.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(matches!(ConfigFile::parse("a_0 = 1.0"), Err(MuneError::Config(_))));
        assert!(matches!(ConfigFile::parse("a0 = \"x\""), Err(MuneError::Config(_))));
        let f = ConfigFile::parse("delta = 1.5").unwrap();
        assert!(f.apply(&SelectionConfig::default()).is_err());
    }
}
