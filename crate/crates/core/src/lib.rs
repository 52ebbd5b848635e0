//! Bayesian motor unit number estimation from stimulus-response data.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod combo;
pub mod config;
pub mod error;
pub mod fit;
pub mod grid;
pub mod io;
pub mod model;
pub mod obs;
pub mod oracle;
pub mod orthant;
pub mod postprocess;
pub mod resample;
pub mod selection;
pub mod serde_ext;
pub mod simulate;
pub mod smc;
pub mod special;

pub use error::{MuneError, Result};
pub use grid::{GridCache, GridEntry, GridPosterior, GridSummary, HistoryKey, Interval, Lattice, StimulusFactors};
pub use model::{ExcitabilityCurve, ExcitabilityParams, Record, StimulusResponseSeries};
pub use obs::{BaselineStats, FiringVector, Hyperparameters, UnitStats};
pub use config::ConfigFile;
pub use fit::{FitResult, ParticleState};
pub use oracle::{exact_log_ml, exact_log_ml_with_limits, OracleLimits};
pub use postprocess::{recalibrate_log_ml, ParameterReport, Recalibration, UnitSummary};
pub use selection::{hpcs, map_model, model_posterior, select, ModelRecord, SelectionConfig, SelectionResult, StabilityConfig};
pub use simulate::{simulate_dataset, simulate_params, Design, SimulatedDataset, TrueSystem, TrueUnit};
pub use smc::{smc_run, Diagnostics, Particle, RunResult, SmcConfig};
