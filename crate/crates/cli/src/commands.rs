use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use smc_mune::io::{read_series_csv, write_grid_csv, write_json, write_series_csv, write_table_csv};
use smc_mune::postprocess::{
    excitability_bands, fitted_means, modal_firing_by_level, predictive_density, LevelRow, DEFAULT_MU_MIN,
};
use smc_mune::{
    exact_log_ml, recalibrate_log_ml, select, simulate_dataset, simulate_params, smc_run, ConfigFile, Design,
    FitResult, MuneError, ParameterReport, Recalibration, Result, SelectionConfig, SimulatedDataset, TrueSystem,
};

use crate::manifest::Recorder;
use crate::{Command, RunArgs};

/// Responses closer than this (mN) belong to the same level in the level table.
const LEVEL_TOLERANCE_MN: f64 = 2.0;
const CURVE_POINTS: usize = 101;
const DENSITY_POINTS: usize = 401;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { units, output, truth, seed } => simulate(units, &output, truth.as_deref(), seed),
        Command::Fit { input, units, output, run } => fit(&input, units, &output, &run),
        Command::Select { input, output, u_max, mu_min, run } => selection(&input, &output, u_max, mu_min, &run),
        Command::Report { input, output, mu_min, seed, config, threads } => {
            report(&input, &output, mu_min, seed, config.as_deref(), threads)
        }
        Command::Oracle { input, units, grid, lambda_max, config } => {
            oracle(&input, units, grid, lambda_max, config.as_deref())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    path.map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
}

/// Defaults, then the config file, then command-line flags.
fn resolve(run: &RunArgs, file: &ConfigFile) -> Result<SelectionConfig> {
    let mut c = file.apply(&SelectionConfig::default())?;
    if let Some(v) = run.seed {
        c.smc.seed = v;
    }
    if let Some(v) = run.particles {
        c.smc.n_particles = v;
    }
    if let Some(v) = run.grid {
        c.smc.grid_n = v;
    }
    if let Some(v) = run.lambda_max {
        c.smc.lambda_max = v;
    }
    Ok(c)
}

/// `SMC_MUNE_THREADS`, then `--threads`, then the config file; otherwise rayon's default.
fn init_threads(flag: Option<usize>, file: Option<usize>) -> Result<()> {
    let from_env = match std::env::var("SMC_MUNE_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| MuneError::Validation(format!("SMC_MUNE_THREADS={v:?} is not a thread count")))?,
        ),
        Err(_) => None,
    };
    let Some(n) = from_env.or(flag).or(file) else {
        return Ok(());
    };
    if n == 0 {
        return Err(MuneError::Validation("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| MuneError::Validation(format!("cannot start {n} worker threads: {e}")))
}

fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    output.with_extension(format!("{suffix}.csv"))
}

#[derive(Serialize)]
struct Truth<'a> {
    system: &'a TrueSystem,
    design: &'a Design,
    dataset: &'a SimulatedDataset,
}

fn simulate(units: usize, output: &Path, truth: Option<&Path>, seed: u64) -> Result<()> {
    let recorder = Recorder::start("simulate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let system = simulate_params(units, &mut rng)?;
    let design = Design::default();
    let dataset = simulate_dataset(&system, &design, &mut rng)?;
    write_series_csv(output, &dataset.series)?;
    let mut outputs = vec![output.to_path_buf()];
    if let Some(path) = truth {
        write_json(path, &Truth { system: &system, design: &design, dataset: &dataset })?;
        outputs.push(path.to_path_buf());
    }
    recorder.finish(Some(seed), &design, Vec::new(), outputs)
}

fn fit(input: &Path, units: usize, output: &Path, run: &RunArgs) -> Result<()> {
    let recorder = Recorder::start("fit");
    let file = load_config(run.config.as_deref())?;
    let config = resolve(run, &file)?;
    init_threads(run.threads, file.threads)?;
    let series = read_series_csv(input)?;
    let result = smc_run(&series, units, &config.smc)?;
    write_json(output, &FitResult::from_run(&result, &series)?)?;
    recorder.finish(Some(config.smc.seed), &config.smc, vec![input.to_path_buf()], vec![output.to_path_buf()])
}

fn selection(input: &Path, output: &Path, u_max: Option<usize>, mu_min: Option<f64>, run: &RunArgs) -> Result<()> {
    let recorder = Recorder::start("select");
    let file = load_config(run.config.as_deref())?;
    let mut config = resolve(run, &file)?;
    if let Some(v) = u_max {
        config.u_max = v;
    }
    if let Some(v) = mu_min {
        config.mu_min = v;
    }
    init_threads(run.threads, file.threads)?;
    let series = read_series_csv(input)?;
    let result = select(&series, &config)?;
    write_json(output, &result)?;
    recorder.finish(Some(config.smc.seed), &config, vec![input.to_path_buf()], vec![output.to_path_buf()])
}

#[derive(Serialize)]
struct Report {
    u: usize,
    recalibration: Recalibration,
    parameters: ParameterReport,
    levels: Vec<LevelRow>,
}

#[derive(Serialize)]
struct ReportSettings {
    mu_min: f64,
    orthant_se: f64,
    level_tolerance: f64,
}

fn report(
    input: &Path,
    output: &Path,
    mu_min: Option<f64>,
    seed: Option<u64>,
    config: Option<&Path>,
    threads: Option<usize>,
) -> Result<()> {
    let recorder = Recorder::start("report");
    let file = load_config(config)?;
    init_threads(threads, file.threads)?;
    let fit: FitResult = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(input)?))?;
    let run = fit.restore()?;
    let series = &fit.series;
    let mu_min = mu_min.or(file.mu_min).unwrap_or(DEFAULT_MU_MIN);
    let orthant_se = file.orthant_se.unwrap_or(SelectionConfig::default().orthant_se);
    let seed = seed.or(file.seed).unwrap_or(fit.config.seed);

    let report = Report {
        u: fit.u,
        recalibration: recalibrate_log_ml(&run, mu_min, seed, orthant_se)?,
        parameters: fit.parameter_summaries.clone(),
        levels: modal_firing_by_level(&run, series, LEVEL_TOLERANCE_MN)?,
    };
    write_json(output, &report)?;
    let mut outputs = vec![output.to_path_buf()];

    let overlay = sidecar(output, "overlay");
    let rows: Vec<Vec<String>> = series
        .records()
        .iter()
        .zip(fitted_means(&run, series))
        .map(|(r, m)| vec![r.stimulus.to_string(), r.response.to_string(), m.to_string()])
        .collect();
    write_table_csv(&overlay, &["stimulus", "response", "expected_response"], &rows)?;
    outputs.push(overlay);

    let levels = sidecar(output, "levels");
    let rows: Vec<Vec<String>> = report
        .levels
        .iter()
        .map(|l| {
            let firing: String = l.firing.iter().map(|b| b.to_string()).collect();
            vec![l.level.to_string(), l.records.to_string(), firing, l.frequency.to_string()]
        })
        .collect();
    write_table_csv(&levels, &["level", "records", "firing", "frequency"], &rows)?;
    outputs.push(levels);

    let s_max = series.supramaximal().stimulus;
    let stimuli: Vec<f64> = (0..CURVE_POINTS).map(|i| s_max * i as f64 / (CURVE_POINTS - 1) as f64).collect();
    let curves = sidecar(output, "curves");
    let rows: Vec<Vec<String>> = excitability_bands(&run, &stimuli)
        .iter()
        .map(|p| {
            [p.unit as f64, p.stimulus, p.mean, p.lower, p.upper].iter().map(|v| v.to_string()).collect()
        })
        .collect();
    write_table_csv(&curves, &["unit", "stimulus", "mean", "lower", "upper"], &rows)?;
    outputs.push(curves);

    let predictive = sidecar(output, "predictive");
    let (lo, hi) = series
        .records()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.response), hi.max(r.response)));
    let ys: Vec<f64> =
        (0..DENSITY_POINTS).map(|i| lo - 10.0 + (hi - lo + 20.0) * i as f64 / (DENSITY_POINTS - 1) as f64).collect();
    let mut rows = Vec::new();
    for q in [0.25, 0.5, 0.75, 1.0] {
        let s = q * s_max;
        for (y, d) in ys.iter().zip(predictive_density(&run, s, &ys)?) {
            rows.push(vec![s.to_string(), y.to_string(), d.to_string()]);
        }
    }
    write_table_csv(&predictive, &["stimulus", "response", "density"], &rows)?;
    outputs.push(predictive);

    // Grids of the most frequent particle state.
    let modal = run.unique_particles().into_iter().max_by_key(|(_, c)| *c).map(|(p, _)| p);
    if let Some(p) = modal {
        for (j, entry) in p.units().iter().enumerate() {
            let path = sidecar(output, &format!("grid_unit{}", j + 1));
            write_grid_csv(&path, entry.grid())?;
            outputs.push(path);
        }
    }

    let settings = ReportSettings { mu_min, orthant_se, level_tolerance: LEVEL_TOLERANCE_MN };
    recorder.finish(Some(seed), &settings, vec![input.to_path_buf()], outputs)
}

fn oracle(input: &Path, units: usize, grid: Option<usize>, lambda_max: Option<f64>, config: Option<&Path>) -> Result<()> {
    let file = load_config(config)?;
    let mut c = file.apply(&SelectionConfig::default())?.smc;
    if let Some(v) = grid {
        c.grid_n = v;
    }
    if let Some(v) = lambda_max {
        c.lambda_max = v;
    }
    let series = read_series_csv(input)?;
    println!("{}", exact_log_ml(&series, units, &c)?);
    Ok(())
}
