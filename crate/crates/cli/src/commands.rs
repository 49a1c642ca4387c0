use std::path::Path;

use jumptel::analytic::{self, DensityResult};
use jumptel::martingale::{self, BalanceReport, SignDiagnostic};
use jumptel::simulate::{self, GirsanovEstimate, McEstimate, SimConfig, TimeSummary};
use jumptel::volterra::{self, TimeGrid};
use jumptel::{ProcessSpec, State};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{write_csv, write_json, Cell};

/// Command-line overrides of config values.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub paths: Option<usize>,
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("config has no `{section}` section"))
}

fn config_check(field: &str, ok: bool, what: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {what}")))
    }
}

fn seed(cfg: &RunConfig, o: &Overrides) -> u64 {
    o.seed.unwrap_or(cfg.seed)
}

#[derive(Serialize)]
struct Reference {
    time: f64,
    mean: f64,
    variance: Option<f64>,
}

#[derive(Serialize)]
struct Estimates<'a> {
    seed: u64,
    n_paths: usize,
    horizon: f64,
    antithetic: bool,
    initial_state: State,
    estimates: &'a [TimeSummary],
    /// Volterra solution at the same times, for memoryless velocities.
    volterra_reference: Option<Vec<Reference>>,
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&v| v <= t).clamp(1, times.len() - 1) - 1;
    let w = (t - times[k]) / (times[k + 1] - times[k]);
    values[k] + w * (values[k + 1] - values[k])
}

fn reference(spec: &ProcessSpec, times: &[f64], horizon: f64) -> Option<Vec<Reference>> {
    if !spec.velocity(State::Zero).is_memoryless() || !spec.velocity(State::One).is_memoryless() {
        return None;
    }
    let steps = (horizon / 1e-3).ceil().max(1.0) as usize;
    let grid = TimeGrid::new(horizon, steps).ok()?;
    let i = spec.initial_state.index();
    let mean = volterra::solve_mean(spec, &grid).ok()?;
    let var = volterra::solve_variance(spec, &grid).ok();
    let nodes = grid.times();
    Some(
        times
            .iter()
            .map(|&t| Reference {
                time: t,
                mean: interpolate(&nodes, &mean.values[i], t),
                variance: var.as_ref().map(|v| interpolate(&nodes, &v.variance[i], t)),
            })
            .collect(),
    )
}

pub fn simulate(cfg: &RunConfig, spec: &ProcessSpec, o: &Overrides, out: &Path) -> Result<(), CliError> {
    let sec = cfg.simulate.as_ref().ok_or_else(|| missing("simulate"))?;
    let paths = o.paths.unwrap_or(sec.paths);
    config_check("simulate.horizon", sec.horizon > 0.0 && sec.horizon.is_finite(), "must be finite and > 0")?;
    config_check("simulate.paths", paths >= 1, "must be >= 1")?;
    config_check(
        "simulate.antithetic",
        !sec.antithetic || paths % 2 == 0,
        "antithetic pairs need an even path count",
    )?;
    let times = if sec.times.is_empty() {
        vec![sec.horizon]
    } else {
        sec.times.clone()
    };
    config_check(
        "simulate.times",
        times.iter().all(|&t| t >= 0.0 && t <= sec.horizon),
        "times must lie in [0, horizon]",
    )?;
    let sim = SimConfig::new(paths, sec.horizon, seed(cfg, o)).with_antithetic(sec.antithetic);
    let summaries = simulate::mc_summary(spec, &times, &sim)?;
    let stored = simulate::sample_paths(spec, sec.store_paths.min(paths), &sim)?;

    let mut rows = Vec::new();
    for (p, path) in stored.iter().enumerate() {
        for n in 0..=path.switch_count() {
            rows.push(vec![
                Cell::from(p),
                Cell::from(n),
                Cell::from(path.switch_times()[n]),
                Cell::from(path.states()[n].index()),
                Cell::from(path.sojourns()[n]),
                if n == 0 {
                    Cell::Empty
                } else {
                    Cell::from(path.jumps()[n - 1])
                },
                Cell::from(path.positions_at_switches()[n]),
            ]);
        }
    }
    write_csv(
        out,
        "paths.csv",
        &["path", "switch", "time", "state", "sojourn", "jump", "position"],
        rows,
    )?;
    let est = Estimates {
        seed: sim.seed,
        n_paths: paths,
        horizon: sec.horizon,
        antithetic: sec.antithetic,
        initial_state: spec.initial_state,
        estimates: &summaries,
        volterra_reference: reference(spec, &times, sec.horizon),
    };
    write_json(out, "estimates.json", &est)?;
    Ok(())
}

#[derive(Serialize)]
struct Atom {
    location: f64,
    analytic_mass: Option<f64>,
    monte_carlo_mass: f64,
    monte_carlo_std_error: f64,
    is_point: bool,
    range: (f64, f64),
}

#[derive(Serialize)]
struct DensitySummary {
    t: f64,
    initial_state: State,
    seed: u64,
    n_paths: usize,
    atom: Atom,
    /// `Σ |exact bin mass - histogram bin mass|` over the bins plus the
    /// difference of the continuous masses left outside them.
    l1_distance: Option<f64>,
    support_covered: Option<bool>,
    outside_mass: f64,
    warnings: Vec<String>,
}

pub fn density(cfg: &RunConfig, spec: &ProcessSpec, o: &Overrides, out: &Path) -> Result<(), CliError> {
    let sec = cfg.density.as_ref().ok_or_else(|| missing("density"))?;
    config_check(
        "density.t",
        sec.t > 0.0 && sec.t.is_finite(),
        "must be finite and > 0 (the law at t = 0 is a point mass)",
    )?;
    let x = sec.x_grid.points()?;
    jumptel::simulate::check_grid(&x).map_err(|e| CliError::Config(format!("density.x_grid: {e}")))?;
    let paths = o.paths.unwrap_or(sec.paths);
    config_check(
        "density.paths",
        paths >= simulate::MIN_DENSITY_PATHS,
        "at least 100 paths are needed for a histogram",
    )?;
    let i = spec.initial_state;
    let analytic: Option<DensityResult> = match cfg.model.constant_params() {
        Some(p) => Some(analytic::density_total(&p?, i, sec.t, &x)?),
        None => None,
    };
    let sim = SimConfig::new(paths, sec.t, seed(cfg, o));
    let mc = simulate::mc_density(spec, sec.t, &x, &sim)?;
    let widths = mc.bin_widths();
    let mut rows = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let m = mc.result.density_values[k];
        let a = analytic.as_ref().map(|a| a.density_values[k]);
        let diff = a.map(|a| (a - m).abs());
        rows.push(vec![Cell::from(x[k]), Cell::from(a), Cell::from(m), Cell::from(diff)]);
    }
    // L1 between exact bin masses and histogram masses, so that density
    // discontinuities inside a bin do not count as error.
    let l1 = match cfg.model.constant_params() {
        Some(p) => {
            let p = p?;
            let exact = analytic::bin_masses(&p, i, sec.t, &mc.bin_edges)?;
            let mut l1: f64 = exact
                .iter()
                .zip(&mc.result.density_values)
                .zip(&widths)
                .map(|((e, d), w)| (e - d * w).abs())
                .sum();
            let outside = analytic::continuous_mass(&p, i, sec.t)? - exact.iter().sum::<f64>();
            l1 += (outside.max(0.0) - mc.outside_mass).abs();
            Some(l1)
        }
        None => None,
    };
    write_csv(out, "density.csv", &["x", "analytic", "monte_carlo", "abs_diff"], rows)?;

    let mut warnings = Vec::new();
    if let Some(a) = &analytic {
        if !a.support_covered {
            warnings.push("x_grid does not cover the support of the density".to_string());
        }
    }
    if mc.outside_mass > 0.0 {
        warnings.push(format!(
            "{:.6} of the continuous Monte Carlo mass falls outside the x_grid bins",
            mc.outside_mass
        ));
    }
    if !mc.atom_is_point {
        warnings.push("velocities depend on the previous sojourn: the no-switch mass is spread, not a point".into());
    }
    let m = mc.result.atom_mass;
    let summary = DensitySummary {
        t: sec.t,
        initial_state: i,
        seed: sim.seed,
        n_paths: paths,
        atom: Atom {
            location: analytic.as_ref().map_or(mc.result.atom_location, |a| a.atom_location),
            analytic_mass: analytic.as_ref().map(|a| a.atom_mass),
            monte_carlo_mass: m,
            monte_carlo_std_error: (m * (1.0 - m) / paths as f64).sqrt(),
            is_point: mc.atom_is_point,
            range: mc.atom_range,
        },
        l1_distance: l1,
        support_covered: analytic.as_ref().map(|a| a.support_covered),
        outside_mass: mc.outside_mass,
        warnings,
    };
    write_json(out, "density.json", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct MomentsSummary {
    order: usize,
    step: f64,
    steps: usize,
    initial_state_columns: &'static str,
    /// `max |σ_i - (μ_i^{(2)} - μ_i^2)|` over the grid, when order >= 2.
    variance_cross_check: Option<f64>,
    /// `max |μ_i - μ_i^{(1)}|` between the mean forcing and the binomial
    /// recursion.
    mean_cross_check: Option<f64>,
    /// Velocities depend on the previous sojourn.
    previous_sojourn_dependent: bool,
    /// `max |μ_i - μ_i^{cond}|` against the mean that tracks the previous
    /// sojourn; nonzero only for sojourn-dependent velocities.
    conditional_mean_gap: Option<f64>,
}

fn max_gap(a: &[Vec<f64>; 2], b: &[Vec<f64>; 2]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

pub fn moments(cfg: &RunConfig, spec: &ProcessSpec, o: &Overrides, out: &Path) -> Result<(), CliError> {
    let sec = cfg.moments.as_ref().ok_or_else(|| missing("moments"))?;
    let dt = o.dt.unwrap_or(sec.dt);
    config_check("moments.dt", dt > 0.0 && dt.is_finite(), "must be finite and > 0")?;
    config_check("moments.horizon", sec.horizon > 0.0 && sec.horizon.is_finite(), "must be finite and > 0")?;
    config_check(
        "moments.order",
        (1..=volterra::MAX_ORDER).contains(&sec.order),
        "must be between 1 and 6",
    )?;
    let grid = TimeGrid::with_step(dt, sec.horizon).map_err(|e| CliError::Config(format!("moments: {e}")))?;
    let sols = volterra::solve_moments(spec, sec.order, &grid)?;
    let variance = if sec.order >= 2 {
        Some(volterra::solve_variance(spec, &grid)?)
    } else {
        None
    };
    let mean = volterra::solve_mean(spec, &grid)?;
    let dependent = !spec.velocity(State::Zero).is_memoryless() || !spec.velocity(State::One).is_memoryless();
    let conditional = if dependent {
        Some(volterra::solve_mean_conditional(spec, &grid)?)
    } else {
        None
    };

    let mut header: Vec<String> = vec!["t".into()];
    for k in 1..=sec.order {
        header.push(format!("mu0_{k}"));
        header.push(format!("mu1_{k}"));
    }
    if variance.is_some() {
        header.push("var0".into());
        header.push("var1".into());
    }
    if conditional.is_some() {
        header.push("mean0_conditional".into());
        header.push("mean1_conditional".into());
    }
    let times = grid.times();
    let rows = (0..grid.len())
        .map(|n| {
            let mut row = vec![Cell::from(times[n])];
            for s in &sols[1..] {
                row.push(Cell::from(s.values[0][n]));
                row.push(Cell::from(s.values[1][n]));
            }
            if let Some(v) = &variance {
                row.push(Cell::from(v.variance[0][n]));
                row.push(Cell::from(v.variance[1][n]));
            }
            if let Some(c) = &conditional {
                row.push(Cell::from(c.values[0][n]));
                row.push(Cell::from(c.values[1][n]));
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(out, "moments.csv", &header_refs, rows)?;

    let variance_cross_check = variance.as_ref().map(|v| {
        let derived: [Vec<f64>; 2] = [0, 1].map(|i| {
            sols[2].values[i]
                .iter()
                .zip(&sols[1].values[i])
                .map(|(m2, m1)| m2 - m1 * m1)
                .collect()
        });
        max_gap(&v.variance, &derived)
    });
    let summary = MomentsSummary {
        order: sec.order,
        step: grid.step(),
        steps: grid.steps(),
        initial_state_columns: "mu{i}_{k}: moment of order k from initial state i",
        variance_cross_check,
        mean_cross_check: Some(max_gap(&mean.values, &sols[1].values)),
        previous_sojourn_dependent: dependent,
        conditional_mean_gap: conditional.as_ref().map(|c| max_gap(&c.values, &mean.values)),
    };
    write_json(out, "moments.json", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    is_martingale: bool,
    max_abs_residual: f64,
    tolerance: f64,
    mean_sup_norm: f64,
    mean_is_zero: bool,
    mean_tolerance: f64,
    signs: &'a [SignDiagnostic; 2],
    singular_points: &'a [f64],
}

pub fn check(cfg: &RunConfig, spec: &ProcessSpec, o: &Overrides, out: &Path) -> Result<(), CliError> {
    let sec = cfg.check.as_ref().ok_or_else(|| missing("check"))?;
    let dt = o.dt.unwrap_or(sec.dt);
    config_check("check.dt", dt > 0.0 && dt.is_finite(), "must be finite and > 0")?;
    config_check("check.horizon", sec.horizon > 0.0 && sec.horizon.is_finite(), "must be finite and > 0")?;
    let grid = TimeGrid::with_step(dt, sec.horizon).map_err(|e| CliError::Config(format!("check: {e}")))?;
    let report = martingale::check_spec(spec, &grid)?;
    let balance: &BalanceReport = &report.balance;
    write_json(out, "balance.json", balance)?;
    let summary = CheckSummary {
        is_martingale: balance.is_martingale,
        max_abs_residual: balance.max_abs_residual,
        tolerance: balance.tolerance,
        mean_sup_norm: report.mean_sup_norm,
        mean_is_zero: report.mean_is_zero,
        mean_tolerance: report.mean_tolerance,
        signs: &balance.signs,
        singular_points: &balance.singular_points,
    };
    write_json(out, "check.json", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct GirsanovSummary<'a> {
    seed: u64,
    n_paths: usize,
    plan: &'a simulate::GirsanovPlan,
    estimates: &'a [GirsanovEstimate],
}

pub fn girsanov(cfg: &RunConfig, spec: &ProcessSpec, o: &Overrides, out: &Path) -> Result<(), CliError> {
    let sec = cfg.girsanov.as_ref().ok_or_else(|| missing("girsanov"))?;
    let base = spec
        .exponential_rates()
        .ok_or_else(|| CliError::Config("girsanov: the model needs exponential sojourns".into()))?;
    let plan = martingale::build_girsanov_plan(base, sec.target)
        .map_err(|e| CliError::Config(format!("girsanov.target: {e}")))?;
    config_check("girsanov.times", !sec.times.is_empty(), "needs at least one time")?;
    config_check(
        "girsanov.times",
        sec.times.iter().all(|t| *t >= 0.0 && t.is_finite()),
        "times must be finite and >= 0",
    )?;
    let paths = o.paths.unwrap_or(sec.paths);
    config_check("girsanov.paths", paths >= 1, "must be >= 1")?;
    let horizon = sec.times.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let sim = SimConfig::new(paths, horizon, seed(cfg, o));
    let est = simulate::mc_girsanov(spec, &plan, &sec.times, &sim)?;
    let cells = |e: &McEstimate| [Cell::from(e.value), Cell::from(e.std_error)];
    let rows = est
        .iter()
        .map(|e| {
            let mut row = vec![Cell::from(e.time)];
            row.extend(cells(&e.weight_mean));
            row.extend(cells(&e.weighted_mean));
            row.extend(cells(&e.unweighted_mean));
            row
        })
        .collect();
    write_csv(
        out,
        "girsanov.csv",
        &[
            "t",
            "weight_mean",
            "weight_std_error",
            "weighted_mean",
            "weighted_std_error",
            "unweighted_mean",
            "unweighted_std_error",
        ],
        rows,
    )?;
    write_json(
        out,
        "girsanov.json",
        &GirsanovSummary {
            seed: sim.seed,
            n_paths: paths,
            plan: &plan,
            estimates: &est,
        },
    )?;
    Ok(())
}
