//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits nonzero when any criterion fails.

mod oracles;

use std::sync::Arc;
use std::time::Instant;

use jumptel::analytic::{self, ConstantCaseParams};
use jumptel::distributions::FamilySpec;
use jumptel::martingale;
use jumptel::simulate::{self, Execution, SimConfig};
use jumptel::volterra::{self, ExpectationOptions, OffGrid, TimeGrid};
use jumptel::{JumpRegime, ProcessSpec, SojournDistribution, State, VelocityRegime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn constant_spec(c: [f64; 2], h: [f64; 2], sojourn: [Arc<dyn SojournDistribution>; 2], i: State) -> ProcessSpec {
    ProcessSpec::new(
        [VelocityRegime::constant(c[0]), VelocityRegime::constant(c[1])],
        [JumpRegime::constant(h[0]), JumpRegime::constant(h[1])],
        sojourn,
        i,
    )
}

fn exponential(lambda: f64) -> Arc<dyn SojournDistribution> {
    FamilySpec::Exponential { lambda }.build_arc().unwrap()
}

fn exponential_spec(c: [f64; 2], h: [f64; 2], lambda: [f64; 2], i: State) -> ProcessSpec {
    constant_spec(c, h, [exponential(lambda[0]), exponential(lambda[1])], i)
}

// 1. Matrix exponential identity and Bessel series.
fn closed_form_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_exp = 0.0f64;
    for _ in 0..100 {
        let lambda = [rng.random_range(0.05..5.0), rng.random_range(0.05..5.0)];
        let t = rng.random_range(0.0..10.0);
        let m = volterra::ExponentialCaseMatrices::new(lambda).unwrap();
        let got = m.exp_generator(t);
        let gen: oracles::Matrix = m.generator.iter().map(|r| r.iter().map(|v| v * t).collect()).collect();
        let want = oracles::expm(&gen);
        for r in 0..2 {
            for c in 0..2 {
                worst_exp = worst_exp.max((got[r][c] - want[r][c]).abs());
            }
        }
    }
    let mut worst_bessel = 0.0f64;
    let mut zs: Vec<f64> = (0..=600).map(|k| 0.05 * k as f64).collect();
    zs.extend((0..50).map(|_| rng.random_range(0.0..30.0)));
    for &z in &zs {
        for order in 0..2 {
            let want = oracles::bessel_i(order, z);
            let got = analytic::bessel_i(order, z).unwrap();
            let err = (got - want).abs() / want.abs().max(1.0);
            worst_bessel = worst_bessel.max(err);
        }
    }
    check(
        worst_exp < 1e-12 && worst_bessel < 1e-10,
        format!("max |exp(tΛ) - expm| = {worst_exp:.2e}, max relative Bessel error = {worst_bessel:.2e} on {} points", zs.len()),
    )
}

fn random_constant_params(rng: &mut ChaCha8Rng, cancel: bool) -> (ConstantCaseParams, State, f64) {
    let c0 = rng.random_range(-1.0..3.0);
    let c1 = c0 - rng.random_range(0.5..4.0);
    let h0 = rng.random_range(-1.0..1.0);
    let h1 = if cancel { -h0 } else { rng.random_range(-1.0..1.0) };
    let lambda: [f64; 2] = [rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)];
    let i = if rng.random_bool(0.5) { State::Zero } else { State::One };
    // λ t between 0.3 and 2.5 for the faster state.
    let t = rng.random_range(0.3..2.5) / lambda[0].max(lambda[1]);
    (ConstantCaseParams::new([c0, c1], [h0, h1], lambda).unwrap(), i, t)
}

// 2. Mass, Bessel form against the switch-count series, Monte Carlo L1.
fn density_consistency() -> Outcome {
    const BINS: usize = 40;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut mass_err, mut form_err, mut l1_max, mut count_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for set in 0..20 {
        let (p, i, t) = random_constant_params(&mut rng, true);
        let mass = analytic::atom_mass(&p, i, t) + analytic::continuous_mass(&p, i, t).unwrap();
        mass_err = mass_err.max((mass - 1.0).abs());

        let (lo, hi) = p.support(i, t);
        for k in 0..400 {
            let x = lo + (hi - lo) * (k as f64 + 0.5) / 400.0;
            let b = analytic::bessel_form(&p, i, x, t).unwrap();
            let s = analytic::series_form(&p, i, x, t, 50).unwrap();
            form_err = form_err.max((b - s).abs());
        }

        let counts = oracles::renewal_counts([p.lambda0, p.lambda1], i.index(), t, 40);
        for (n, want) in counts.iter().enumerate().skip(1).take(8) {
            count_err = count_err.max((analytic::term_mass(&p, i, t, n).unwrap() - want).abs());
        }
        count_err = count_err.max((analytic::atom_mass(&p, i, t) - counts[0]).abs());

        let spec = p.to_spec(i).unwrap();
        let x = analytic::bin_centres(&p, i, t, BINS);
        let mc = simulate::mc_density(&spec, t, &x, &SimConfig::new(100_000, t, 2000 + set)).unwrap();
        let exact = analytic::bin_masses(&p, i, t, &mc.bin_edges).unwrap();
        let widths = mc.bin_widths();
        let mut l1: f64 = exact
            .iter()
            .zip(&mc.result.density_values)
            .zip(&widths)
            .map(|((e, d), w)| (e - d * w).abs())
            .sum();
        let outside = analytic::continuous_mass(&p, i, t).unwrap() - exact.iter().sum::<f64>();
        l1 += (outside.max(0.0) - mc.outside_mass).abs();
        l1_max = l1_max.max(l1);
    }
    // Jumps that do not cancel: the series carries all the mass as well.
    for _ in 0..20 {
        let (p, i, t) = random_constant_params(&mut rng, false);
        let mass = analytic::atom_mass(&p, i, t) + analytic::continuous_mass(&p, i, t).unwrap();
        mass_err = mass_err.max((mass - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mass_err < 1e-6 && form_err < 1e-8 && count_err < 1e-8 && l1_max < 0.02 && secs <= 60.0,
        format!(
            "mass error {mass_err:.2e}, Bessel vs series {form_err:.2e}, switch-count masses {count_err:.2e}, \
             max L1 {l1_max:.4} ({BINS} bins, 1e5 paths), {secs:.1} s"
        ),
    )
}

fn volterra_errors(c: [f64; 2], h: [f64; 2], lambda: [f64; 2], horizon: f64, step: f64) -> (f64, f64, f64) {
    let spec = exponential_spec(c, h, lambda, State::Zero);
    let grid = TimeGrid::with_step(step, horizon).unwrap();
    let var = volterra::solve_variance(&spec, &grid).unwrap();
    let forcing = volterra::forcing_mean(&spec, &grid).unwrap();
    let closed = volterra::closed_form_moments(&forcing, lambda, &grid).unwrap();
    let (mut mean_err, mut var_err, mut closed_err) = (0.0f64, 0.0f64, 0.0f64);
    for (n, &t) in grid.times().iter().enumerate() {
        let exact = oracles::constant_case_moments(c, h, lambda, 2, t);
        for s in 0..2 {
            let m = exact[s][1];
            let v = exact[s][2] - m * m;
            mean_err = mean_err.max((var.mean[s][n] - m).abs());
            var_err = var_err.max((var.variance[s][n] - v).abs());
            closed_err = closed_err.max((closed[s][n] - m).abs());
        }
    }
    (mean_err, var_err, closed_err)
}

// 3. Second-order convergence on exponential cases.
fn volterra_convergence() -> Outcome {
    let cases = [
        ([1.0, -1.0], [0.0, 0.0], [1.0, 1.0]),
        ([2.0, -0.5], [-0.4, 0.3], [1.5, 0.7]),
        ([0.5, -1.5], [0.8, 0.2], [0.6, 2.2]),
    ];
    let steps = [8e-3, 4e-3, 2e-3, 1e-3];
    let mut lines = Vec::new();
    let mut ok = true;
    for (c, h, lambda) in cases {
        let errs: Vec<(f64, f64, f64)> = steps.iter().map(|&dt| volterra_errors(c, h, lambda, 2.0, dt)).collect();
        let ratios = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> { errs.windows(2).map(|w| f(&w[0]) / f(&w[1])).collect() };
        let mean_ratios = ratios(|e| e.0);
        let var_ratios = ratios(|e| e.1);
        let last = errs[errs.len() - 1];
        ok &= mean_ratios.iter().chain(&var_ratios).all(|r| (3.5..=4.5).contains(r));
        ok &= last.0 < 1e-6 && last.1 < 1e-6 && last.2 < 1e-6;
        let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join("/");
        lines.push(format!(
            "mean ratios {} var ratios {} final {:.1e}/{:.1e} closed form {:.1e}",
            fmt(&mean_ratios),
            fmt(&var_ratios),
            last.0,
            last.1,
            last.2
        ));
    }
    check(ok, lines.join("; "))
}

fn erlang_weibull_spec() -> ProcessSpec {
    ProcessSpec::new(
        [
            VelocityRegime::memoryless(|t| 1.0 + 0.5 * t.sin()),
            VelocityRegime::memoryless(|t| -0.8 * (-0.3 * t).exp()),
        ],
        [JumpRegime::constant(0.3), JumpRegime::new(|s| -0.2 * s)],
        [
            FamilySpec::Erlang { lambda: 3.0, n: 2 }.build_arc().unwrap(),
            FamilySpec::Weibull { lambda: 1.2, alpha: 0.5 }.build_arc().unwrap(),
        ],
        State::Zero,
    )
}

fn remembering_spec() -> ProcessSpec {
    ProcessSpec::new(
        [
            VelocityRegime::new(|prev, t| 1.0 / (1.0 + prev) + 0.2 * t),
            VelocityRegime::new(|prev, _| -0.5 - 0.5 * (-prev).exp()),
        ],
        [JumpRegime::new(|s| 0.2 * s), JumpRegime::constant(-0.1)],
        [
            FamilySpec::Logistic { lambda: 1.5 }.build_arc().unwrap(),
            FamilySpec::Exponential { lambda: 0.8 }.build_arc().unwrap(),
        ],
        State::Zero,
    )
}

// 4. Variance system against the moment recursion; expectation surfaces.
fn moment_cross_validation() -> Outcome {
    let specs = [
        ("exponential", exponential_spec([1.5, -1.0], [0.2, -0.4], [1.0, 2.0], State::Zero)),
        ("erlang/weibull", erlang_weibull_spec()),
        ("sojourn-dependent", remembering_spec()),
    ];
    let grid = TimeGrid::with_step(1e-3, 2.0).unwrap();
    let mut var_gap = 0.0f64;
    for (_, spec) in &specs {
        let moments = volterra::solve_moments(spec, 2, &grid).unwrap();
        let var = volterra::solve_variance(spec, &grid).unwrap();
        for s in 0..2 {
            for n in 0..grid.len() {
                let m = moments[1].values[s][n];
                var_gap = var_gap.max((var.variance[s][n] - (moments[2].values[s][n] - m * m)).abs());
            }
        }
    }
    let coarse = TimeGrid::with_step(1e-2, 1.0).unwrap();
    let x: Vec<f64> = (0..=1200).map(|k| -6.0 + 0.01 * k as f64).collect();
    let opts = ExpectationOptions {
        off_grid: OffGrid::Extrapolate { margin: 6.0 },
        ..Default::default()
    };
    let mut surface_gap = 0.0f64;
    for (_, spec) in &specs[..2] {
        let moments = volterra::solve_moments(spec, 2, &coarse).unwrap();
        for k in 1..=2 {
            let surf = volterra::solve_expectation(spec, |x: f64| x.powi(k as i32), &x, &coarse, &opts).unwrap();
            for i in State::BOTH {
                for n in 0..coarse.len() {
                    let got = surf.at(i, n, 0.0).unwrap();
                    surface_gap = surface_gap.max((got - moments[k].values[i.index()][n]).abs());
                }
            }
        }
    }
    check(
        var_gap < 1e-8 && surface_gap < 1e-4,
        format!("max |σ - (μ2 - μ²)| = {var_gap:.2e}, max expectation-surface gap (orders 1-2) = {surface_gap:.2e}"),
    )
}

fn catalog() -> [FamilySpec; 7] {
    [
        FamilySpec::Exponential { lambda: 1.3 },
        FamilySpec::Erlang { lambda: 2.0, n: 3 },
        FamilySpec::Weibull { lambda: 1.0, alpha: 0.5 },
        FamilySpec::Pareto { lambda: 1.5, b: 0.4 },
        FamilySpec::Logistic { lambda: 1.2 },
        FamilySpec::HalfCauchy { a: 1.0 },
        FamilySpec::Uniform { upper: 1.5 },
    ]
}

struct MartingaleChecks {
    residual: f64,
    mean_sup: f64,
    worst_z: f64,
    best_z: f64,
}

fn martingale_checks(spec: &ProcessSpec, seed: u64) -> MartingaleChecks {
    let grid = TimeGrid::with_step(1e-2, 2.0).unwrap();
    let report = martingale::check_spec(spec, &grid).unwrap();
    let times = [0.5, 1.0, 2.0];
    let mc = simulate::mc_summary(spec, &times, &SimConfig::new(100_000, 2.0, seed)).unwrap();
    let z: Vec<f64> = mc.iter().map(|s| (s.mean.value / s.mean.std_error).abs()).collect();
    MartingaleChecks {
        residual: report.balance.max_abs_residual,
        mean_sup: report.mean_sup_norm,
        worst_z: z.iter().copied().fold(0.0, f64::max),
        best_z: z.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Velocity `-H r` with jump `H`: the drift is doubled instead of cancelled.
fn mis_signed(families: [FamilySpec; 2], amplitudes: [f64; 2], flip_velocity: [bool; 2]) -> ProcessSpec {
    let state = |k: usize| {
        let fam = families[k];
        let dist = fam.build_arc().unwrap();
        let d = dist.clone();
        let h = amplitudes[k];
        let v = if flip_velocity[k] { -h } else { h };
        let j = if flip_velocity[k] { h } else { -h };
        let velocity = VelocityRegime::memoryless(move |t| v * fam.martingale_ratio(t).unwrap())
            .with_displacement(move |_, u, t| v * (d.log_survival(t) - d.log_survival(u)))
            .with_breakpoints(dist.breakpoints());
        (velocity, JumpRegime::constant(j), dist)
    };
    let (v0, j0, d0) = state(0);
    let (v1, j1, d1) = state(1);
    ProcessSpec::new([v0, v1], [j0, j1], [d0, d1], State::Zero)
}

// 5. Calibrated catalog is a martingale; mis-signed specifications are not.
fn martingale_suite() -> Outcome {
    let fams = catalog();
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, fam) in fams.iter().enumerate() {
        let pair = [*fam, fams[(k + 1) % fams.len()]];
        let initial = if k % 2 == 0 { State::Zero } else { State::One };
        let spec = martingale::calibrated_spec(pair, [0.7, -0.9], initial).unwrap();
        let c = martingale_checks(&spec, 500 + k as u64);
        ok &= c.residual < 1e-8 && c.mean_sup < 1e-6 && c.worst_z < 3.0;
        parts.push(format!("{} {:.0e}/{:.0e}/z{:.2}", fam.name(), c.residual, c.mean_sup, c.worst_z));
    }
    let wrong = [
        mis_signed([fams[0], fams[1]], [0.7, -0.9], [true, true]),
        mis_signed([fams[2], fams[4]], [0.5, 0.6], [false, true]),
    ];
    for (k, spec) in wrong.iter().enumerate() {
        let c = martingale_checks(spec, 600 + k as u64);
        ok &= c.residual >= 1e-8 && c.mean_sup >= 1e-6 && c.best_z > 3.0;
        parts.push(format!("mis-signed {} {:.1e}/{:.1e}/z{:.1}", k + 1, c.residual, c.mean_sup, c.best_z));
    }
    check(ok, format!("residual/mean sup/max |z|: {}", parts.join(", ")))
}

// 6. Densities rebuilt from their ratios.
fn roundtrip() -> Outcome {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut fams = catalog().to_vec();
    fams.push(FamilySpec::Weibull { lambda: 0.8, alpha: -0.5 });
    for fam in &fams {
        let grid = martingale::roundtrip_grid(fam, 2001).unwrap();
        let err = martingale::roundtrip_check(fam, &grid).unwrap();
        worst = worst.max(err);
        parts.push(format!("{} {err:.1e}", fam.name()));
    }
    check(worst < 1e-8, format!("max abs error {worst:.2e} ({})", parts.join(", ")))
}

// 7. Likelihood-ratio weights.
fn girsanov() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut ok = true;
    let mut parts = Vec::new();
    for k in 0..5 {
        let base = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
        let target = [base[0] * rng.random_range(0.6..1.6), base[1] * rng.random_range(0.6..1.6)];
        let plan = martingale::build_girsanov_plan(base, target).unwrap();
        // Martingale under the target intensities.
        let c = [rng.random_range(0.2..1.5), -rng.random_range(0.2..1.5)];
        let h = [-c[0] / target[0], -c[1] / target[1]];
        let spec = exponential_spec(c, h, base, State::Zero);
        let est = simulate::mc_girsanov(&spec, &plan, &[1.0], &SimConfig::new(100_000, 1.0, 700 + k)).unwrap();
        let e = &est[0];
        let zw = (e.weight_mean.value - 1.0) / e.weight_mean.std_error;
        let zm = e.weighted_mean.value / e.weighted_mean.std_error;
        ok &= zw.abs() < 3.0 && zm.abs() < 3.0;
        parts.push(format!("z(W-1) {zw:+.2} z(WX) {zm:+.2}"));
    }
    check(ok, parts.join(", "))
}

fn fingerprint() -> String {
    let spec = remembering_spec();
    let constant = exponential_spec([1.0, -0.5], [0.3, -0.2], [1.0, 1.5], State::One);
    let sim = SimConfig::new(20_000, 2.0, 88);
    let mut out = String::new();
    out += &serde_json::to_string(&simulate::mc_summary(&spec, &[0.5, 1.0, 2.0], &sim).unwrap()).unwrap();
    out += &serde_json::to_string(&simulate::sample_paths(&spec, 50, &sim).unwrap()).unwrap();
    let x: Vec<f64> = (0..60).map(|k| -1.0 + 0.05 * k as f64).collect();
    out += &serde_json::to_string(&simulate::mc_density(&spec, 1.5, &x, &sim).unwrap()).unwrap();
    let plan = martingale::build_girsanov_plan([1.0, 1.5], [1.4, 0.9]).unwrap();
    out += &serde_json::to_string(&simulate::mc_girsanov(&constant, &plan, &[1.0, 2.0], &sim).unwrap()).unwrap();
    let grid = TimeGrid::with_step(0.02, 1.0).unwrap();
    let xs: Vec<f64> = (0..=200).map(|k| -3.0 + 0.03 * k as f64).collect();
    let opts = ExpectationOptions {
        off_grid: OffGrid::Extrapolate { margin: 3.0 },
        ..Default::default()
    };
    out += &serde_json::to_string(&volterra::solve_expectation(&constant, |x: f64| x.abs(), &xs, &grid, &opts).unwrap()).unwrap();
    out
}

// 8. Byte-identical outputs across thread counts and executions.
fn determinism() -> Outcome {
    let runs: Vec<String> = [1, 4, 8, 8]
        .iter()
        .map(|&n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(fingerprint))
        .collect();
    let spec = remembering_spec();
    let sim = SimConfig::new(20_000, 2.0, 88);
    let par = serde_json::to_string(&simulate::mc_summary(&spec, &[1.0], &sim).unwrap()).unwrap();
    let seq = serde_json::to_string(
        &simulate::mc_summary(&spec, &[1.0], &sim.with_execution(Execution::Sequential)).unwrap(),
    )
    .unwrap();
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    check(
        same && par == seq,
        format!(
            "{} bytes per run; threads 1/4/8 identical: {same}; sequential = parallel: {}",
            runs[0].len(),
            par == seq
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("closed-form identities", closed_form_identities),
        ("density consistency", density_consistency),
        ("Volterra convergence", volterra_convergence),
        ("moment cross-validation", moment_cross_validation),
        ("martingale characterisation", martingale_suite),
        ("ratio roundtrip", roundtrip),
        ("Girsanov weights", girsanov),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name} [{secs:.1} s]: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name} [{secs:.1} s]: {detail}", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
