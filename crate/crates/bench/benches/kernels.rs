use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smc_mune::combo::ComboTable;
use smc_mune::grid::{GridPosterior, Lattice};
use smc_mune::model::ExcitabilityCurve;
use smc_mune::obs::{BaselineStats, Hyperparameters, UnitStats};
use smc_mune::{simulate_dataset, simulate_params, smc_run, Design, SmcConfig};

fn combo_table(c: &mut Criterion) {
    let h = Hyperparameters::default();
    let baseline = BaselineStats { a: 10.5, b: 0.6, m: 0.0, c: 0.05 };
    let mut group = c.benchmark_group("combo_table");
    for u in [4usize, 8, 12] {
        let mut stats = UnitStats::prior(u, 0.7, &h).unwrap();
        stats.m = stats.m.map(|v| v * 0.9);
        let predictives: Vec<f64> = (0..u).map(|j| (j as f64 + 0.5) / u as f64).collect();
        group.bench_with_input(BenchmarkId::from_parameter(u), &u, |b, _| {
            b.iter(|| ComboTable::build(black_box(&stats), &baseline, black_box(120.0), &predictives, 0.0).unwrap())
        });
    }
    group.finish();
}

fn grid_update(c: &mut Criterion) {
    let curve = ExcitabilityCurve::LogLogistic;
    let mut group = c.benchmark_group("grid_update");
    for n in [30usize, 50, 100] {
        let lattice = Arc::new(Lattice::square(n, 44.0, 14.0).unwrap());
        let grid = GridPosterior::prior(Arc::clone(&lattice));
        let factors = lattice.stimulus_factors(curve, 21.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let g = grid.update(true, black_box(&factors)).unwrap();
                g.fire_predictive(&factors).unwrap()
            })
        });
    }
    group.finish();
}

fn filter_run(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sys = simulate_params(3, &mut rng).unwrap();
    let series = simulate_dataset(&sys, &Design::even(20, 40.0, 5.0, 40.0, 60), &mut rng).unwrap().series;
    let mut group = c.benchmark_group("smc_run");
    group.sample_size(10);
    for u in [2usize, 3, 4] {
        let config = SmcConfig { n_particles: 2000, grid_n: 30, seed: 1, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(u), &u, |b, &u| {
            b.iter(|| smc_run(black_box(&series), u, &config).unwrap().log_ml)
        });
    }
    group.finish();
}

criterion_group!(benches, combo_table, grid_update, filter_run);
criterion_main!(benches);
