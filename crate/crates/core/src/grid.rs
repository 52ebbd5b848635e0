//! Lattice approximation of each motor unit's excitability posterior.
//!
//! The posterior over `(eta, lambda)` is stored (unnormalized, in log space) at
//! the vertices of a regular rectangular lattice. Integrals use the tensor
//! trapezium rule, which is exactly the integral of the bilinear interpolant
//! of the vertex values. Units whose firing histories agree share one grid.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MuneError, Result};
use crate::model::{excitability_prior_logdensity, ExcitabilityCurve, ExcitabilityParams};

/// Vertex-anchored lattice over `[eta_max/n_eta, eta_max] x [lambda_max/n_lambda, lambda_max]`.
#[derive(Debug, Clone)]
pub struct Lattice {
    n_eta: usize,
    n_lambda: usize,
    eta_max: f64,
    lambda_max: f64,
    /// Trapezium weights times the cell area, indexed like the vertices.
    weights: Vec<f64>,
}

impl Lattice {
    pub fn new(n_eta: usize, n_lambda: usize, eta_max: f64, lambda_max: f64) -> Result<Self> {
        if n_eta < 2 || n_lambda < 2 {
            return Err(MuneError::validation(format!(
                "lattice needs at least 2 vertices per dimension, got {n_eta}x{n_lambda}"
            )));
        }
        if !(eta_max > 0.0 && eta_max.is_finite() && lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(MuneError::validation("lattice bounds must be positive and finite"));
        }
        let axis = |n: usize| -> Vec<f64> {
            (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 } else { 1.0 }).collect()
        };
        let (we, wl) = (axis(n_eta), axis(n_lambda));
        let area = (eta_max / n_eta as f64) * (lambda_max / n_lambda as f64);
        let weights = we.iter().flat_map(|a| wl.iter().map(move |b| a * b * area)).collect();
        Ok(Lattice { n_eta, n_lambda, eta_max, lambda_max, weights })
    }

    pub fn square(n: usize, eta_max: f64, lambda_max: f64) -> Result<Self> {
        Self::new(n, n, eta_max, lambda_max)
    }

    pub fn n_eta(&self) -> usize {
        self.n_eta
    }

    pub fn n_lambda(&self) -> usize {
        self.n_lambda
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn len(&self) -> usize {
        self.n_eta * self.n_lambda
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eta_step(&self) -> f64 {
        self.eta_max / self.n_eta as f64
    }

    pub fn lambda_step(&self) -> f64 {
        self.lambda_max / self.n_lambda as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.eta_step() * self.lambda_step()
    }

    pub fn eta(&self, i: usize) -> f64 {
        self.eta_max * (i + 1) as f64 / self.n_eta as f64
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.lambda_max * (k + 1) as f64 / self.n_lambda as f64
    }

    pub fn index(&self, i: usize, k: usize) -> usize {
        i * self.n_lambda + k
    }

    pub fn coords(&self, idx: usize) -> (f64, f64) {
        (self.eta(idx / self.n_lambda), self.lambda(idx % self.n_lambda))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Domain of integration `(eta_lo, eta_hi, lambda_lo, lambda_hi)`.
    pub fn domain(&self) -> (f64, f64, f64, f64) {
        (self.eta(0), self.eta_max, self.lambda(0), self.lambda_max)
    }

    /// Evaluates the firing probability at every vertex for one stimulus.
    pub fn stimulus_factors(&self, curve: ExcitabilityCurve, stimulus: f64) -> StimulusFactors {
        let n = self.len();
        let mut f = StimulusFactors {
            stimulus,
            ln_fire: Vec::with_capacity(n),
            ln_quiet: Vec::with_capacity(n),
            fire: Vec::with_capacity(n),
            quiet: Vec::with_capacity(n),
            weighted_fire: Vec::with_capacity(n),
        };
        for idx in 0..n {
            let (eta, lambda) = self.coords(idx);
            let (lf, lq) = curve.ln_prob_pair(stimulus, eta, lambda);
            let p = curve.prob(stimulus, eta, lambda);
            f.ln_fire.push(lf);
            f.ln_quiet.push(lq);
            f.fire.push(p);
            f.quiet.push(lq.exp());
            f.weighted_fire.push(self.weights[idx] * p);
        }
        f
    }
}

/// Per-vertex firing factors at one stimulus, shared by every grid on a lattice.
#[derive(Debug, Clone)]
pub struct StimulusFactors {
    pub stimulus: f64,
    pub ln_fire: Vec<f64>,
    pub ln_quiet: Vec<f64>,
    pub fire: Vec<f64>,
    pub quiet: Vec<f64>,
    weighted_fire: Vec<f64>,
}

/// Median and central 95% interval of a scalar posterior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub eta: Interval,
    pub lambda: Interval,
    pub eta_mean: f64,
}

/// Unnormalized log posterior of `(eta, lambda)` at the lattice vertices.
#[derive(Clone)]
pub struct GridPosterior {
    lattice: Arc<Lattice>,
    log_values: Vec<f64>,
    max_log: f64,
    /// `exp(log_values - max_log)`; values far below the maximum may flush to zero.
    scaled: Vec<f64>,
    /// Trapezium integral of `scaled`.
    mass: f64,
}

impl fmt::Debug for GridPosterior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridPosterior")
            .field("n_eta", &self.lattice.n_eta)
            .field("n_lambda", &self.lattice.n_lambda)
            .field("max_log", &self.max_log)
            .field("mass", &self.mass)
            .finish()
    }
}

impl GridPosterior {
    /// Log prior density at each vertex; boundary vertices at the upper limits
    /// sit on the zero of the beta density and hold `-inf`.
    pub fn prior(lattice: Arc<Lattice>) -> Self {
        let log_values: Vec<f64> = (0..lattice.len())
            .map(|idx| {
                let (eta, lambda) = lattice.coords(idx);
                excitability_prior_logdensity(
                    ExcitabilityParams { eta, lambda },
                    lattice.eta_max,
                    lattice.lambda_max,
                )
            })
            .collect();
        Self::from_log_values(lattice, log_values).expect("prior grid has positive interior mass")
    }

    /// Builds a grid from arbitrary log values (one per vertex).
    pub fn from_log_values(lattice: Arc<Lattice>, log_values: Vec<f64>) -> Result<Self> {
        if log_values.len() != lattice.len() {
            return Err(MuneError::validation("log value count does not match the lattice"));
        }
        if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(MuneError::validation("grid log values must be finite or -inf"));
        }
        let max_log = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_log == f64::NEG_INFINITY {
            return Err(MuneError::Annihilated("every vertex has zero density".into()));
        }
        let scaled: Vec<f64> = log_values.iter().map(|v| (v - max_log).exp()).collect();
        let mass = dot(&scaled, &lattice.weights);
        Ok(GridPosterior { lattice, log_values, max_log, scaled, mass })
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn max_log(&self) -> f64 {
        self.max_log
    }

    /// Multiplies in one Bernoulli factor, `F(s)` if `fired` else `1 - F(s)`.
    pub fn update(&self, fired: bool, factors: &StimulusFactors) -> Result<Self> {
        let (ln_factor, factor) = if fired {
            (&factors.ln_fire, &factors.fire)
        } else {
            (&factors.ln_quiet, &factors.quiet)
        };
        let log_values: Vec<f64> = self.log_values.iter().zip(ln_factor).map(|(v, f)| v + f).collect();
        let (argmax, max_log) = log_values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if max_log == f64::NEG_INFINITY {
            return Err(MuneError::Annihilated(format!(
                "firing indicator {} at stimulus {} has zero probability",
                fired as u8, factors.stimulus
            )));
        }

        // Rescale multiplicatively; fall back to exponentiation when the
        // product loses the new maximum to underflow.
        let rescale = (self.max_log - max_log).exp();
        let mut scaled = Vec::new();
        if rescale.is_finite() && rescale < 1e300 {
            scaled = self.scaled.iter().zip(factor).map(|(s, f)| s * f * rescale).collect();
            if (scaled[argmax] - 1.0).abs() > 1e-9 {
                scaled.clear();
            }
        }
        if scaled.is_empty() {
            scaled = log_values.iter().map(|v| (v - max_log).exp()).collect();
        }
        let mass = dot(&scaled, &self.lattice.weights);
        Ok(GridPosterior { lattice: Arc::clone(&self.lattice), log_values, max_log, scaled, mass })
    }

    /// Trapezium integral of `exp(log_values - max_log + log_factor)` over the lattice.
    ///
    /// Add `max_log` back (in log space) for the absolute value.
    pub fn trapezium_integral(&self, log_factor: Option<&[f64]>) -> f64 {
        match log_factor {
            None => self.mass,
            Some(factor) => self
                .log_values
                .iter()
                .zip(factor)
                .zip(&self.lattice.weights)
                .map(|((v, f), w)| w * (v - self.max_log + f).exp())
                .sum(),
        }
    }

    /// Log of the absolute trapezium integral.
    pub fn log_integral(&self) -> f64 {
        self.max_log + self.mass.ln()
    }

    /// Posterior predictive probability that the unit fires at `factors.stimulus`.
    pub fn fire_predictive(&self, factors: &StimulusFactors) -> Result<f64> {
        if !(self.mass > 0.0) {
            return Err(MuneError::Annihilated("grid has zero mass".into()));
        }
        let p = dot(&self.scaled, &factors.weighted_fire) / self.mass;
        Ok(p.clamp(0.0, 1.0))
    }

    /// Convenience form of [`fire_predictive`](Self::fire_predictive) that evaluates the curve itself.
    pub fn fire_predictive_at(&self, curve: ExcitabilityCurve, stimulus: f64) -> Result<f64> {
        self.fire_predictive(&self.lattice.stimulus_factors(curve, stimulus))
    }

    /// Normalized marginal densities at the vertices, `(eta, lambda)`.
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let lat = &self.lattice;
        let (ne, nl) = (lat.n_eta, lat.n_lambda);
        let axis_w = |i: usize, n: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let mut eta_m = vec![0.0; ne];
        let mut lambda_m = vec![0.0; nl];
        for i in 0..ne {
            for k in 0..nl {
                let v = self.scaled[lat.index(i, k)];
                eta_m[i] += axis_w(k, nl) * lat.lambda_step() * v;
                lambda_m[k] += axis_w(i, ne) * lat.eta_step() * v;
            }
        }
        let norm = self.mass;
        eta_m.iter_mut().for_each(|v| *v /= norm);
        lambda_m.iter_mut().for_each(|v| *v /= norm);
        (eta_m, lambda_m)
    }

    pub fn summary(&self) -> GridSummary {
        let (eta_m, lambda_m) = self.marginals();
        let lat = &self.lattice;
        let etas: Vec<f64> = (0..lat.n_eta).map(|i| lat.eta(i)).collect();
        let lambdas: Vec<f64> = (0..lat.n_lambda).map(|k| lat.lambda(k)).collect();
        GridSummary {
            eta: marginal_interval(&etas, &eta_m),
            lambda: marginal_interval(&lambdas, &lambda_m),
            eta_mean: marginal_mean(&etas, &eta_m),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trapezium cumulative sums of a vertex density.
pub(crate) fn cumulative(coords: &[f64], density: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(coords.len());
    cum.push(0.0);
    for i in 1..coords.len() {
        let step = 0.5 * (density[i - 1] + density[i]) * (coords[i] - coords[i - 1]);
        cum.push(cum[i - 1] + step);
    }
    cum
}

/// Quantile by linear interpolation of the cumulative sums.
pub(crate) fn interpolate_quantile(coords: &[f64], cum: &[f64], q: f64) -> f64 {
    let total = *cum.last().unwrap();
    let target = q * total;
    let i = cum.partition_point(|&c| c < target);
    if i == 0 {
        return coords[0];
    }
    if i >= cum.len() {
        return *coords.last().unwrap();
    }
    let span = cum[i] - cum[i - 1];
    let frac = if span > 0.0 { (target - cum[i - 1]) / span } else { 0.0 };
    coords[i - 1] + frac * (coords[i] - coords[i - 1])
}

pub(crate) fn marginal_interval(coords: &[f64], density: &[f64]) -> Interval {
    let cum = cumulative(coords, density);
    Interval {
        median: interpolate_quantile(coords, &cum, 0.5),
        lower: interpolate_quantile(coords, &cum, 0.025),
        upper: interpolate_quantile(coords, &cum, 0.975),
    }
}

pub(crate) fn marginal_mean(coords: &[f64], density: &[f64]) -> f64 {
    let weighted: Vec<f64> = coords.iter().zip(density).map(|(c, d)| c * d).collect();
    let num = cumulative(coords, &weighted);
    let den = cumulative(coords, density);
    num.last().unwrap() / den.last().unwrap()
}

/// A unit's firing indicators over the assimilated non-baseline records.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct HistoryKey {
    words: Vec<u64>,
    len: usize,
}

impl HistoryKey {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "history index {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        if bit {
            self.words[self.len / 64] |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn child(&self, bit: bool) -> Self {
        let mut k = self.clone();
        k.push(bit);
        k
    }

    pub fn parent(&self) -> Option<Self> {
        if self.len == 0 {
            return None;
        }
        Some(self.iter().take(self.len - 1).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

impl FromIterator<bool> for HistoryKey {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let mut k = HistoryKey::new();
        iter.into_iter().for_each(|b| k.push(b));
        k
    }
}

impl fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.iter().try_for_each(|b| f.write_str(if b { "1" } else { "0" }))
    }
}

impl fmt::Debug for HistoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HistoryKey({self})")
    }
}

impl std::str::FromStr for HistoryKey {
    type Err = MuneError;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(MuneError::validation(format!("invalid history character {other:?}"))),
            })
            .collect()
    }
}

impl Serialize for HistoryKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HistoryKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A cached grid together with the history that produced it.
pub struct GridEntry {
    key: HistoryKey,
    grid: GridPosterior,
    predictive_memo: Mutex<Vec<(u64, f64)>>,
}

impl fmt::Debug for GridEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridEntry").field("key", &self.key).field("grid", &self.grid).finish()
    }
}

impl GridEntry {
    fn new(key: HistoryKey, grid: GridPosterior) -> Self {
        GridEntry { key, grid, predictive_memo: Mutex::new(Vec::new()) }
    }

    pub fn key(&self) -> &HistoryKey {
        &self.key
    }

    pub fn grid(&self) -> &GridPosterior {
        &self.grid
    }

    /// Firing predictive at `factors.stimulus`, memoized per stimulus.
    pub fn fire_predictive(&self, factors: &StimulusFactors) -> Result<f64> {
        let tag = factors.stimulus.to_bits();
        if let Some(&(_, p)) = self.predictive_memo.lock().unwrap().iter().find(|(s, _)| *s == tag) {
            return Ok(p);
        }
        let p = self.grid.fire_predictive(factors)?;
        self.predictive_memo.lock().unwrap().push((tag, p));
        Ok(p)
    }
}

/// One grid per distinct firing history.
///
/// Lookups are by history key; misses are computed from the parent grid with
/// a single update. Entries no longer held by any particle are dropped by
/// [`evict_unreferenced`](Self::evict_unreferenced).
pub struct GridCache {
    lattice: Arc<Lattice>,
    curve: ExcitabilityCurve,
    root: Arc<GridEntry>,
    entries: HashMap<HistoryKey, Arc<GridEntry>>,
    enabled: bool,
    updates: usize,
}

impl GridCache {
    pub fn new(lattice: Arc<Lattice>, curve: ExcitabilityCurve) -> Self {
        let root = Arc::new(GridEntry::new(HistoryKey::new(), GridPosterior::prior(Arc::clone(&lattice))));
        let mut entries = HashMap::new();
        entries.insert(HistoryKey::new(), Arc::clone(&root));
        GridCache { lattice, curve, root, entries, enabled: true, updates: 0 }
    }

    /// With caching disabled every request recomputes its grid.
    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn curve(&self) -> ExcitabilityCurve {
        self.curve
    }

    pub fn root(&self) -> Arc<GridEntry> {
        Arc::clone(&self.root)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of grid updates computed so far.
    pub fn updates_computed(&self) -> usize {
        self.updates
    }

    pub fn get(&self, key: &HistoryKey) -> Option<Arc<GridEntry>> {
        self.entries.get(key).cloned()
    }

    /// Returns the grid for `parent_key` extended by one indicator.
    pub fn cache_get_or_extend(
        &mut self,
        parent_key: &HistoryKey,
        fired: bool,
        factors: &StimulusFactors,
    ) -> Result<Arc<GridEntry>> {
        let parent = self.entries.get(parent_key).cloned().ok_or_else(|| {
            MuneError::numerical(format!("grid cache invariant violated: parent {parent_key} missing"))
        })?;
        self.extend(&parent, fired, factors)
    }

    pub fn extend(
        &mut self,
        parent: &Arc<GridEntry>,
        fired: bool,
        factors: &StimulusFactors,
    ) -> Result<Arc<GridEntry>> {
        Ok(self.extend_many(&[(Arc::clone(parent), fired)], factors)?.pop().unwrap())
    }

    /// Extends several parents at once; misses are computed in parallel and
    /// inserted in request order.
    pub fn extend_many(
        &mut self,
        requests: &[(Arc<GridEntry>, bool)],
        factors: &StimulusFactors,
    ) -> Result<Vec<Arc<GridEntry>>> {
        let keys: Vec<HistoryKey> = requests.iter().map(|(p, bit)| p.key.child(*bit)).collect();
        let mut missing: Vec<usize> = Vec::new();
        let mut seen: HashMap<&HistoryKey, ()> = HashMap::new();
        for (i, key) in keys.iter().enumerate() {
            let cached = self.enabled && self.entries.contains_key(key);
            if !cached && (!self.enabled || seen.insert(key, ()).is_none()) {
                missing.push(i);
            }
        }
        let computed: Vec<Result<GridPosterior>> = missing
            .par_iter()
            .map(|&i| requests[i].0.grid.update(requests[i].1, factors))
            .collect();
        self.updates += computed.len();

        let mut fresh: HashMap<HistoryKey, Arc<GridEntry>> = HashMap::new();
        let mut out_fresh: Vec<Option<Arc<GridEntry>>> = vec![None; requests.len()];
        for (&i, grid) in missing.iter().zip(computed) {
            let entry = Arc::new(GridEntry::new(keys[i].clone(), grid?));
            if self.enabled {
                self.entries.insert(keys[i].clone(), Arc::clone(&entry));
                fresh.insert(keys[i].clone(), Arc::clone(&entry));
            }
            out_fresh[i] = Some(entry);
        }
        Ok(keys
            .into_iter()
            .zip(out_fresh)
            .map(|(key, made)| made.unwrap_or_else(|| Arc::clone(&self.entries[&key])))
            .collect())
    }

    /// Drops entries that no particle references any more.
    pub fn evict_unreferenced(&mut self) {
        let root_key = HistoryKey::new();
        self.entries.retain(|k, e| *k == root_key || Arc::strong_count(e) > 1);
    }
}
