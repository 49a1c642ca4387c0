//! Exact path sampling and Monte Carlo estimators.
//!
//! A path started in state `i` draws its pre-start sojourn `T_0` from the
//! law of the opposite state, then alternates sojourns from `f_i`,
//! `f_{1-i}`, … until the horizon is passed. Each sojourn is produced by
//! inverting the survival function at one uniform variate, which is what
//! the antithetic option mirrors.

pub mod engine;
pub mod stats;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::analytic::DensityResult;
use crate::error::{Error, Result};
use crate::model::{open_unit, Path, ProcessSpec};

pub use engine::{Execution, BATCH_SIZE};
pub use stats::MomentAccumulator;

/// Upper bound on switches within one path; guards degenerate sojourn laws.
pub const MAX_SWITCHES: usize = 50_000_000;
/// Minimum path count for density estimation.
pub const MIN_DENSITY_PATHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub horizon: f64,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default)]
    pub execution: Execution,
}

impl SimConfig {
    pub fn new(n_paths: usize, horizon: f64, seed: u64) -> Self {
        Self {
            n_paths,
            horizon,
            seed,
            antithetic: false,
            execution: Execution::Parallel,
        }
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidParameter {
                name: "n_paths",
                value: 0.0,
                constraint: "at least one path is required".into(),
            });
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(Error::InvalidParameter {
                name: "n_paths",
                value: self.n_paths as f64,
                constraint: "antithetic sampling needs an even path count".into(),
            });
        }
        crate::error::positive("horizon", self.horizon)?;
        Ok(())
    }

    fn units(&self) -> usize {
        if self.antithetic {
            self.n_paths / 2
        } else {
            self.n_paths
        }
    }
}

/// A Monte Carlo point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl McEstimate {
    /// Whether `target` lies within `k` standard errors of the estimate.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }
}

/// Samples one path on `[0, horizon]`.
pub fn sample_path(spec: &ProcessSpec, horizon: f64, rng: &mut dyn RngCore) -> Result<Path> {
    sample_path_with(spec, horizon, &mut || open_unit(rng))
}

/// Samples one path, drawing every sojourn by inverting its survival
/// function at the next value of `unit`.
pub fn sample_path_with(
    spec: &ProcessSpec,
    horizon: f64,
    unit: &mut dyn FnMut() -> f64,
) -> Result<Path> {
    crate::error::positive("horizon", horizon)?;
    let initial = spec.initial_state;
    let pre = spec
        .sojourn(initial.flip())
        .inverse_survival(unit())
        .map_err(|e| sampling_context(initial.flip(), e))?;
    let mut path = Path::start(initial, pre, horizon);
    let mut state = initial;
    for _ in 0..MAX_SWITCHES {
        let duration = spec
            .sojourn(state)
            .inverse_survival(unit())
            .map_err(|e| sampling_context(state, e))?;
        if !path.push_switch(spec, duration)? {
            return Ok(path);
        }
        state = state.flip();
    }
    Err(Error::Sampling(format!(
        "more than {MAX_SWITCHES} switches before horizon {horizon}"
    )))
}

fn sampling_context(state: crate::model::State, e: Error) -> Error {
    match e {
        Error::Sampling(msg) => Error::Sampling(format!("sojourn in state {state}: {msg}")),
        other => other,
    }
}

/// Calls `visit` once per sampling unit: a single path, or an antithetic
/// pair when enabled. Returns one accumulator per batch, in batch order.
fn for_each_unit<S, M, V>(spec: &ProcessSpec, config: &SimConfig, make: M, visit: V) -> Result<Vec<S>>
where
    S: Send,
    M: Fn() -> S + Sync + Send,
    V: Fn(&mut S, &[Path]) -> Result<()> + Sync + Send,
{
    config.validate()?;
    engine::map_batches(config.units(), config.seed, config.execution, |_, range, rng| {
        let mut acc = make();
        let mut draws: Vec<f64> = Vec::new();
        for _ in range {
            if config.antithetic {
                draws.clear();
                let first = sample_path_with(spec, config.horizon, &mut || {
                    let u = open_unit(rng);
                    draws.push(u);
                    u
                })?;
                let mut k = 0;
                let second = sample_path_with(spec, config.horizon, &mut || {
                    let u = if k < draws.len() { 1.0 - draws[k] } else { open_unit(rng) };
                    k += 1;
                    u
                })?;
                visit(&mut acc, &[first, second])?;
            } else {
                let path = sample_path(spec, config.horizon, rng)?;
                visit(&mut acc, std::slice::from_ref(&path))?;
            }
        }
        Ok(acc)
    })
}

fn check_times(times: &[f64], horizon: f64) -> Result<()> {
    for &t in times {
        if !(t >= 0.0 && t <= horizon) {
            return Err(Error::Domain {
                what: "estimation time",
                value: t,
                constraint: format!("requires 0 <= t <= horizon = {horizon}"),
            });
        }
    }
    Ok(())
}

/// Monte Carlo summary of `X(t)` at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeSummary {
    pub time: f64,
    pub mean: McEstimate,
    pub variance: McEstimate,
    pub second_moment: McEstimate,
    /// Probability of no switch on `(0, t]` (the atom mass).
    pub no_switch: McEstimate,
}

#[derive(Clone, Default)]
struct TimeAccumulators {
    units: MomentAccumulator,
    paths: MomentAccumulator,
    no_switch: MomentAccumulator,
}

/// Mean, variance, second moment and atom mass at each of `times`, all
/// computed from one shared set of paths.
pub fn mc_summary(spec: &ProcessSpec, times: &[f64], config: &SimConfig) -> Result<Vec<TimeSummary>> {
    config.validate()?;
    check_times(times, config.horizon)?;
    let batches = for_each_unit(
        spec,
        config,
        || vec![TimeAccumulators::default(); times.len()],
        |acc, paths| {
            for (slot, &t) in acc.iter_mut().zip(times) {
                let mut unit = 0.0;
                let mut none = 0.0;
                for path in paths {
                    let x = path.position_at(spec, t)?;
                    slot.paths.push(x);
                    unit += x;
                    if path.count_at(t) == 0 {
                        none += 1.0;
                    }
                }
                let k = paths.len() as f64;
                slot.units.push(unit / k);
                slot.no_switch.push(none / k);
            }
            Ok(())
        },
    )?;
    let mut total = vec![TimeAccumulators::default(); times.len()];
    for batch in &batches {
        for (t, b) in total.iter_mut().zip(batch) {
            t.units.merge(&b.units);
            t.paths.merge(&b.paths);
            t.no_switch.merge(&b.no_switch);
        }
    }
    let n_paths = config.n_paths;
    Ok(total
        .iter()
        .zip(times)
        .map(|(acc, &time)| TimeSummary {
            time,
            mean: McEstimate {
                value: acc.units.mean(),
                std_error: acc.units.std_error_of_mean(),
                n_paths,
            },
            variance: McEstimate {
                value: acc.paths.variance(),
                std_error: acc.paths.std_error_of_variance(),
                n_paths,
            },
            second_moment: McEstimate {
                value: acc.paths.second_moment(),
                std_error: acc.paths.std_error_of_second_moment(),
                n_paths,
            },
            no_switch: McEstimate {
                value: acc.no_switch.mean(),
                std_error: acc.no_switch.std_error_of_mean(),
                n_paths,
            },
        })
        .collect())
}

/// Sample mean of `X(t)` with its standard error.
pub fn mc_mean(spec: &ProcessSpec, t: f64, config: &SimConfig) -> Result<McEstimate> {
    Ok(mc_summary(spec, &[t], config)?[0].mean)
}

/// Plug-in sample variance of `X(t)` with an approximate standard error.
pub fn mc_variance(spec: &ProcessSpec, t: f64, config: &SimConfig) -> Result<McEstimate> {
    Ok(mc_summary(spec, &[t], config)?[0].variance)
}

/// Histogram estimate of the law of `X(t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McDensity {
    /// Atom (paths without a switch) and histogram density at the grid
    /// points; `support_covered` is false when some switched paths fell
    /// outside the bins.
    pub result: DensityResult,
    pub bin_edges: Vec<f64>,
    /// Mass of switched paths that fell outside the bins.
    pub outside_mass: f64,
    /// True when every no-switch path ended at the same position, so the
    /// atom is a point mass at `result.atom_location`.
    pub atom_is_point: bool,
    /// Range of no-switch positions.
    pub atom_range: (f64, f64),
    pub n_paths: usize,
}

impl McDensity {
    /// Atom mass plus the histogram integral.
    pub fn total_mass(&self) -> f64 {
        self.result.atom_mass + self.histogram_mass()
    }

    pub fn histogram_mass(&self) -> f64 {
        self.result
            .density_values
            .iter()
            .zip(self.bin_edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    pub fn bin_widths(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|e| e[1] - e[0]).collect()
    }
}

/// Bin edges with `x_grid` points as bin centres.
pub fn centred_edges(x_grid: &[f64]) -> Vec<f64> {
    let n = x_grid.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(x_grid[0] - 0.5 * (x_grid[1] - x_grid[0]));
    for w in x_grid.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(x_grid[n - 1] + 0.5 * (x_grid[n - 1] - x_grid[n - 2]));
    edges
}

#[derive(Clone)]
struct HistogramAccumulator {
    counts: Vec<u64>,
    outside: u64,
    atom_count: u64,
    atom_sum: f64,
    atom_min: f64,
    atom_max: f64,
}

/// Monte Carlo density of `X(t)` on bins centred at `x_grid`.
///
/// Paths without a switch by `t` form the singular part and are reported as
/// the atom; for constant velocities they all sit at `c_i t`. The remaining
/// paths are histogrammed.
pub fn mc_density(spec: &ProcessSpec, t: f64, x_grid: &[f64], config: &SimConfig) -> Result<McDensity> {
    config.validate()?;
    if config.n_paths < MIN_DENSITY_PATHS {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            value: config.n_paths as f64,
            constraint: format!("density estimation needs at least {MIN_DENSITY_PATHS} paths"),
        });
    }
    if !(t > 0.0) {
        return Err(Error::Domain {
            what: "mc_density",
            value: t,
            constraint: "density is degenerate at t <= 0".into(),
        });
    }
    check_times(&[t], config.horizon)?;
    check_grid(x_grid)?;
    let edges = centred_edges(x_grid);
    let bins = x_grid.len();
    let batches = for_each_unit(
        spec,
        config,
        || HistogramAccumulator {
            counts: vec![0; bins],
            outside: 0,
            atom_count: 0,
            atom_sum: 0.0,
            atom_min: f64::INFINITY,
            atom_max: f64::NEG_INFINITY,
        },
        |acc, paths| {
            for path in paths {
                let x = path.position_at(spec, t)?;
                if path.count_at(t) == 0 {
                    acc.atom_count += 1;
                    acc.atom_sum += x;
                    acc.atom_min = acc.atom_min.min(x);
                    acc.atom_max = acc.atom_max.max(x);
                } else if x < edges[0] || x >= edges[bins] {
                    acc.outside += 1;
                } else {
                    let k = edges.partition_point(|&e| e <= x) - 1;
                    acc.counts[k.min(bins - 1)] += 1;
                }
            }
            Ok(())
        },
    )?;
    let mut counts = vec![0u64; bins];
    let (mut outside, mut atom_count, mut atom_sum) = (0u64, 0u64, 0.0);
    let (mut atom_min, mut atom_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for b in &batches {
        counts.iter_mut().zip(&b.counts).for_each(|(c, d)| *c += d);
        outside += b.outside;
        atom_count += b.atom_count;
        atom_sum += b.atom_sum;
        atom_min = atom_min.min(b.atom_min);
        atom_max = atom_max.max(b.atom_max);
    }
    let n = config.n_paths as f64;
    let density_values = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    let atom_is_point = atom_count > 0 && atom_min == atom_max;
    let atom_location = if atom_count == 0 {
        f64::NAN
    } else if atom_is_point {
        atom_min
    } else {
        atom_sum / atom_count as f64
    };
    Ok(McDensity {
        result: DensityResult {
            atom_location,
            atom_mass: atom_count as f64 / n,
            x_grid: x_grid.to_vec(),
            density_values,
            support_covered: outside == 0,
        },
        bin_edges: edges,
        outside_mass: outside as f64 / n,
        atom_is_point,
        atom_range: (atom_min, atom_max),
        n_paths: config.n_paths,
    })
}

pub fn check_grid(x_grid: &[f64]) -> Result<()> {
    if x_grid.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "x_grid",
            value: x_grid.len() as f64,
            constraint: "grid needs at least two points".into(),
        });
    }
    if let Some(w) = x_grid.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter {
            name: "x_grid",
            value: w[1],
            constraint: "grid must be strictly increasing".into(),
        });
    }
    if x_grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "x_grid",
            value: f64::NAN,
            constraint: "grid must be finite".into(),
        });
    }
    Ok(())
}

/// Measure change towards target intensities for exponential sojourns.
///
/// `c*_i = μ_i - λ_i` and `h*_i = -c*_i / μ_i`, so that `1 + h*_i = λ_i / μ_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GirsanovPlan {
    pub base_intensities: [f64; 2],
    pub target_intensities: [f64; 2],
    pub star_velocities: [f64; 2],
    pub star_jumps: [f64; 2],
}

impl GirsanovPlan {
    pub fn new(base: [f64; 2], target: [f64; 2]) -> Result<Self> {
        for i in 0..2 {
            crate::error::positive(if i == 0 { "mu0" } else { "mu1" }, base[i])?;
            crate::error::positive(if i == 0 { "lambda0" } else { "lambda1" }, target[i])?;
        }
        let star_velocities = [base[0] - target[0], base[1] - target[1]];
        let star_jumps = [
            -star_velocities[0] / base[0],
            -star_velocities[1] / base[1],
        ];
        Ok(Self {
            base_intensities: base,
            target_intensities: target,
            star_velocities,
            star_jumps,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.star_velocities == [0.0, 0.0]
    }
}

/// Likelihood ratio `exp{∫_0^t c*_{ε(s)} ds} · Π_{k ≤ N(t)} (1 + h*_{i_k})`,
/// where `i_k` is the state of the `k`-th completed sojourn.
pub fn girsanov_weight(path: &Path, plan: &GirsanovPlan, t: f64) -> Result<f64> {
    check_times(&[t], path.horizon())?;
    let n = path.count_at(t);
    let taus = path.switch_times();
    let states = path.states();
    let mut log_w = 0.0;
    for k in 0..=n {
        let end = if k < n { taus[k + 1] } else { t };
        let s = states[k].index();
        log_w += plan.star_velocities[s] * (end - taus[k]);
        if k < n {
            log_w += (1.0 + plan.star_jumps[s]).ln();
        }
    }
    Ok(log_w.exp())
}

/// Weighted and unweighted Monte Carlo means at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GirsanovEstimate {
    pub time: f64,
    pub weight_mean: McEstimate,
    pub weighted_mean: McEstimate,
    pub unweighted_mean: McEstimate,
}

#[derive(Clone, Default)]
struct GirsanovAccumulators {
    weight: MomentAccumulator,
    weighted: MomentAccumulator,
    plain: MomentAccumulator,
}

/// Estimates `E[W]`, `E[W X(t)]` and `E[X(t)]` under the simulation measure.
///
/// The specification's sojourn laws must be exponential with the plan's base
/// intensities.
pub fn mc_girsanov(
    spec: &ProcessSpec,
    plan: &GirsanovPlan,
    times: &[f64],
    config: &SimConfig,
) -> Result<Vec<GirsanovEstimate>> {
    let rates = spec.exponential_rates().ok_or_else(|| {
        Error::Unsupported("likelihood-ratio weights need exponential sojourns".into())
    })?;
    for i in 0..2 {
        if (rates[i] - plan.base_intensities[i]).abs() > 1e-12 * rates[i] {
            return Err(Error::InvalidParameter {
                name: "base_intensities",
                value: plan.base_intensities[i],
                constraint: format!("must equal the simulated sojourn rate {}", rates[i]),
            });
        }
    }
    config.validate()?;
    check_times(times, config.horizon)?;
    let batches = for_each_unit(
        spec,
        config,
        || vec![GirsanovAccumulators::default(); times.len()],
        |acc, paths| {
            for (slot, &t) in acc.iter_mut().zip(times) {
                let (mut w_sum, mut wx_sum, mut x_sum) = (0.0, 0.0, 0.0);
                for path in paths {
                    let w = girsanov_weight(path, plan, t)?;
                    let x = path.position_at(spec, t)?;
                    w_sum += w;
                    wx_sum += w * x;
                    x_sum += x;
                }
                let k = paths.len() as f64;
                slot.weight.push(w_sum / k);
                slot.weighted.push(wx_sum / k);
                slot.plain.push(x_sum / k);
            }
            Ok(())
        },
    )?;
    let mut total = vec![GirsanovAccumulators::default(); times.len()];
    for batch in &batches {
        for (t, b) in total.iter_mut().zip(batch) {
            t.weight.merge(&b.weight);
            t.weighted.merge(&b.weighted);
            t.plain.merge(&b.plain);
        }
    }
    let estimate = |acc: &MomentAccumulator| McEstimate {
        value: acc.mean(),
        std_error: acc.std_error_of_mean(),
        n_paths: config.n_paths,
    };
    Ok(total
        .iter()
        .zip(times)
        .map(|(acc, &time)| GirsanovEstimate {
            time,
            weight_mean: estimate(&acc.weight),
            weighted_mean: estimate(&acc.weighted),
            unweighted_mean: estimate(&acc.plain),
        })
        .collect())
}

/// Samples the first `count` paths of the configured run, in order.
pub fn sample_paths(spec: &ProcessSpec, count: usize, config: &SimConfig) -> Result<Vec<Path>> {
    let config = SimConfig {
        n_paths: if config.antithetic { count + count % 2 } else { count },
        ..*config
    };
    if count == 0 {
        return Ok(Vec::new());
    }
    let batches = for_each_unit(spec, &config, Vec::new, |acc: &mut Vec<Path>, paths| {
        acc.extend_from_slice(paths);
        Ok(())
    })?;
    let mut out: Vec<Path> = batches.into_iter().flatten().collect();
    out.truncate(count);
    Ok(out)
}
