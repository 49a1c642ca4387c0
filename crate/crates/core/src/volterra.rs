//! Coupled Volterra systems of the second kind for moments and expectation
//! functionals.
//!
//! All solvers share a uniform time grid and the product trapezoidal rule:
//! on each panel the unknown is interpolated linearly and integrated exactly
//! against the kernel. Kernel weights are built from the cdf, so densities
//! with integrable singularities or jumps are handled without special
//! casing. Averages over the previous sojourn `T ~ f_{1-i}` use
//! [`ExpectationRule`].

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProcessSpec, SojournDistribution, State};
use crate::quadrature::{self, ExpectationRule, GaussLegendre};

/// Highest moment order accepted by [`solve_moments`].
pub const MAX_ORDER: usize = 6;
/// Dyadic refinement levels used on the first panel, where densities and
/// velocities may be singular.
const GRADED_LEVELS: usize = 60;

/// Uniform grid `t_n = n Δt`, `n = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    step: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        crate::error::positive("horizon", horizon)?;
        if steps == 0 {
            return Err(Error::InvalidParameter {
                name: "steps",
                value: 0.0,
                constraint: "must be at least 1".into(),
            });
        }
        Ok(Self {
            step: horizon / steps as f64,
            steps,
        })
    }

    /// Grid ending exactly at `horizon` with step at most `step`.
    pub fn with_step(step: f64, horizon: f64) -> Result<Self> {
        crate::error::positive("step", step)?;
        crate::error::positive("horizon", horizon)?;
        let steps = ((horizon / step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self::new(horizon, steps)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.step
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }

    /// Index of the node at `t`, if `t` is a node.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let n = (t / self.step).round();
        (n >= 0.0 && n as usize <= self.steps && (n * self.step - t).abs() <= 1e-9 * self.step.max(t))
            .then_some(n as usize)
    }

    /// Every sojourn law supported away from zero (Pareto) must satisfy
    /// `Δt <= b / 4`.
    pub fn check_against(&self, spec: &ProcessSpec) -> Result<()> {
        for s in State::BOTH {
            let lower = spec.sojourn(s).support().0;
            if lower > 0.0 && self.step > 0.25 * lower {
                return Err(Error::InvalidParameter {
                    name: "step",
                    value: self.step,
                    constraint: format!(
                        "sojourn law of state {s} starts at {lower}; the step must not exceed {}",
                        0.25 * lower
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Quadrature nodes on each grid panel: 8-point Gauss–Legendre, split at
/// breakpoints, with dyadic grading towards zero on the first panel.
#[derive(Debug, Clone)]
struct PanelRule {
    offsets: Vec<usize>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl PanelRule {
    fn new(grid: &TimeGrid, breakpoints: &[f64]) -> Self {
        let rule = GaussLegendre::short();
        let mut offsets = vec![0];
        let mut nodes = Vec::with_capacity(8 * grid.steps());
        let mut weights = Vec::with_capacity(8 * grid.steps());
        for j in 0..grid.steps() {
            let (a, b) = (grid.time(j), grid.time(j + 1));
            let mut cuts = vec![a];
            cuts.extend(breakpoints.iter().copied().filter(|&p| p > a && p < b));
            cuts.push(b);
            cuts.sort_by(f64::total_cmp);
            for (k, w) in cuts.windows(2).enumerate() {
                if j == 0 && k == 0 {
                    let mut hi = w[1];
                    for _ in 0..GRADED_LEVELS {
                        let lo = 0.5 * hi;
                        for (x, q) in rule.mapped(lo, hi) {
                            nodes.push(x);
                            weights.push(q);
                        }
                        hi = lo;
                    }
                } else {
                    for (x, q) in rule.mapped(w[0], w[1]) {
                        nodes.push(x);
                        weights.push(q);
                    }
                }
            }
            offsets.push(nodes.len());
        }
        Self {
            offsets,
            nodes,
            weights,
        }
    }

    fn panel(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    fn panels(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Cumulative integral of node values, from 0 to every grid node.
    fn cumulative(&self, values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.panels() + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for j in 0..self.panels() {
            acc += self.panel(j).map(|k| self.weights[k] * values[k]).sum::<f64>();
            out.push(acc);
        }
        out
    }
}

/// Product-trapezoid weights of a kernel `w(s)` on the grid:
/// `∫_{s_j}^{s_{j+1}} w(s) x(t - s) ds ≈ α_j x(t - s_j) + β_j x(t - s_{j+1})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelWeights {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl KernelWeights {
    /// Weights of a sojourn density, from exact cdf increments and
    /// Gauss–Legendre moments of the cdf.
    pub fn from_distribution(dist: &dyn SojournDistribution, grid: &TimeGrid) -> Self {
        let h = grid.step();
        let rule = GaussLegendre::short();
        let breaks = dist.breakpoints();
        let mut alpha = Vec::with_capacity(grid.steps());
        let mut beta = Vec::with_capacity(grid.steps());
        for j in 0..grid.steps() {
            let (a, b) = (grid.time(j), grid.time(j + 1));
            let fb = dist.cdf(b);
            let mass = fb - dist.cdf(a);
            let mut cuts = vec![a];
            cuts.extend(breaks.iter().copied().filter(|&p| p > a && p < b));
            cuts.push(b);
            // ∫_a^b (F(b) - F(s)) ds
            let first: f64 = cuts
                .windows(2)
                .map(|w| rule.integrate(w[0], w[1], |s| fb - dist.cdf(s)))
                .sum();
            let m1 = first / h;
            alpha.push(mass - m1);
            beta.push(m1);
        }
        Self { alpha, beta }
    }

    fn from_nodes(rule: &PanelRule, grid: &TimeGrid, values: &[f64]) -> Self {
        let h = grid.step();
        let mut alpha = Vec::with_capacity(grid.steps());
        let mut beta = Vec::with_capacity(grid.steps());
        for j in 0..grid.steps() {
            let a = grid.time(j);
            let (mut m0, mut m1) = (0.0, 0.0);
            for k in rule.panel(j) {
                let w = rule.weights[k] * values[k];
                m0 += w;
                m1 += w * (rule.nodes[k] - a) / h;
            }
            alpha.push(m0 - m1);
            beta.push(m1);
        }
        Self { alpha, beta }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `Σ_{j<n} α_j x_{n-j} + β_j x_{n-j-1}`.
    pub fn convolve(&self, x: &[f64], n: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..n {
            acc += self.alpha[j] * x[n - j] + self.beta[j] * x[n - j - 1];
        }
        acc
    }

    /// The same sum without the `j = 0` implicit term `α_0 x_n`.
    fn convolve_explicit(&self, x: &[f64], n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let mut acc = self.beta[0] * x[n - 1];
        for j in 1..n {
            acc += self.alpha[j] * x[n - j] + self.beta[j] * x[n - j - 1];
        }
        acc
    }

    /// Coefficient of `x(t_n - s_j)` after gathering both panel ends.
    fn node_weight(&self, j: usize, n: usize) -> f64 {
        let left = if j < n { self.alpha[j] } else { 0.0 };
        let right = if j >= 1 { self.beta[j - 1] } else { 0.0 };
        left + right
    }
}

/// `x_0 = a_0 + f_0 ⋆ x_1`, `x_1 = a_1 + f_1 ⋆ x_0` on a grid.
#[derive(Debug, Clone)]
pub struct VolterraSystem {
    pub forcing: [Vec<f64>; 2],
    pub kernels: [KernelWeights; 2],
    pub grid: TimeGrid,
}

impl VolterraSystem {
    pub fn new(forcing: [Vec<f64>; 2], kernels: [KernelWeights; 2], grid: TimeGrid) -> Result<Self> {
        for (i, a) in forcing.iter().enumerate() {
            if a.len() != grid.len() {
                return Err(Error::InvalidParameter {
                    name: "forcing",
                    value: a.len() as f64,
                    constraint: format!("forcing {i} must have {} grid values", grid.len()),
                });
            }
            if let Some(n) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::Solver(format!(
                    "forcing {i} is not finite at t = {}",
                    grid.time(n)
                )));
            }
        }
        Ok(Self {
            forcing,
            kernels,
            grid,
        })
    }

    /// Kernels taken from the sojourn laws of `spec`.
    pub fn for_spec(spec: &ProcessSpec, forcing: [Vec<f64>; 2], grid: TimeGrid) -> Result<Self> {
        Self::new(forcing, spec_kernels(spec, &grid), grid)
    }
}

fn spec_kernels(spec: &ProcessSpec, grid: &TimeGrid) -> [KernelWeights; 2] {
    [
        KernelWeights::from_distribution(spec.sojourn(State::Zero), grid),
        KernelWeights::from_distribution(spec.sojourn(State::One), grid),
    ]
}

/// Solves the pair by joint time-stepping; each step is a 2×2 linear solve.
pub fn solve_pair(system: &VolterraSystem) -> Result<[Vec<f64>; 2]> {
    let n_nodes = system.grid.len();
    let [k0, k1] = &system.kernels;
    let [a0, a1] = &system.forcing;
    let mut x0 = vec![0.0; n_nodes];
    let mut x1 = vec![0.0; n_nodes];
    x0[0] = a0[0];
    x1[0] = a1[0];
    if system.grid.steps() == 0 {
        return Ok([x0, x1]);
    }
    let (p, q) = (k0.alpha[0], k1.alpha[0]);
    let det = 1.0 - p * q;
    if !(det.abs() > 1e-12) {
        return Err(Error::Solver(format!(
            "step system is singular (kernel weights {p}, {q}); refine the grid"
        )));
    }
    for n in 1..n_nodes {
        let r0 = a0[n] + k0.convolve_explicit(&x1, n);
        let r1 = a1[n] + k1.convolve_explicit(&x0, n);
        let v0 = (r0 + p * r1) / det;
        let v1 = r1 + q * v0;
        if !(v0.is_finite() && v1.is_finite()) {
            return Err(Error::Solver(format!(
                "solution is not finite at t = {}",
                system.grid.time(n)
            )));
        }
        x0[n] = v0;
        x1[n] = v1;
    }
    Ok([x0, x1])
}

/// Rule over the previous sojourn `T ~ f_{1-i}` for the velocity of state
/// `i`; a single point when the velocity ignores `T`.
pub fn previous_sojourn_rule(spec: &ProcessSpec, i: State) -> Result<ExpectationRule> {
    if spec.velocity(i).is_memoryless() {
        Ok(ExpectationRule::point(0.0))
    } else {
        ExpectationRule::for_distribution(spec.sojourn(i.flip()))
    }
}

fn state_breakpoints(spec: &ProcessSpec, i: State) -> Vec<f64> {
    let mut b = spec.sojourn(i).breakpoints();
    b.extend_from_slice(spec.velocity(i).breakpoints());
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}


/// `a_i(t) = ∫_0^t (F̄_i(s) c̄_i(s) + f_i(s) h_i(s)) ds` on the grid, with
/// `c̄_i(s) = E c_i(T, s)`.
pub fn forcing_mean(spec: &ProcessSpec, grid: &TimeGrid) -> Result<[Vec<f64>; 2]> {
    let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for i in State::BOTH {
        let rule = previous_sojourn_rule(spec, i)?;
        let panels = PanelRule::new(grid, &state_breakpoints(spec, i));
        let dist = spec.sojourn(i);
        let regime = spec.velocity(i);
        let jump = spec.jump(i);
        let mut values = Vec::with_capacity(panels.nodes.len());
        for &s in &panels.nodes {
            let cbar = rule.expect(|tau| regime.velocity(tau, s));
            let v = dist.survival(s) * cbar + dist.density(s) * jump.amplitude(s);
            if !v.is_finite() {
                return Err(Error::Quadrature {
                    lower: 0.0,
                    upper: s,
                    reason: format!("mean forcing integrand is {v} at s = {s}"),
                });
            }
            values.push(v);
        }
        out[i.index()] = panels.cumulative(&values);
    }
    Ok(out)
}

/// Displacement after one previous sojourn `τ`: `l(τ; s) + h(s)` at panel
/// nodes and `l(τ; t_n)` at grid nodes. Times at or past the end of the
/// sojourn support are left at zero; they carry no probability.
struct Profile {
    jumped: Vec<f64>,
    head: Vec<f64>,
}

impl Profile {
    fn new(
        regime: &crate::model::VelocityRegime,
        jumps: &[f64],
        panels: &PanelRule,
        grid: &TimeGrid,
        tau: f64,
        upper: f64,
    ) -> Result<Self> {
        let mut jumped = vec![0.0; panels.nodes.len()];
        let mut head = vec![0.0; grid.len()];
        let mut at_node = 0.0;
        for j in 0..panels.panels() {
            let a = grid.time(j);
            if a >= upper {
                break;
            }
            for k in panels.panel(j) {
                let s = panels.nodes[k];
                if s >= upper {
                    break;
                }
                jumped[k] = at_node + regime.displacement(tau, a, s)? + jumps[k];
            }
            let b = grid.time(j + 1);
            if b >= upper {
                break;
            }
            at_node += regime.displacement(tau, a, b)?;
            head[j + 1] = at_node;
        }
        Ok(Self { jumped, head })
    }
}

/// `(l_i(T; s) + h_i(s))^m` averaged over `T` at panel nodes, and
/// `l_i(T; t_n)^m` averaged over `T` at grid nodes, for `m = 0..=order`.
struct StateTables {
    panels: PanelRule,
    /// `[m][node]`
    g: Vec<Vec<f64>>,
    /// `[m][n]`
    l_pow: Vec<Vec<f64>>,
    density: Vec<f64>,
    survival: Vec<f64>,
}

impl StateTables {
    fn new(spec: &ProcessSpec, i: State, grid: &TimeGrid, order: usize) -> Result<Self> {
        let rule = previous_sojourn_rule(spec, i)?;
        let panels = PanelRule::new(grid, &state_breakpoints(spec, i));
        let regime = spec.velocity(i);
        let jumps: Vec<f64> = panels.nodes.iter().map(|&s| spec.jump(i).amplitude(s)).collect();
        if let Some(k) = jumps.iter().position(|h| !h.is_finite()) {
            return Err(Error::Domain {
                what: "jump amplitude",
                value: panels.nodes[k],
                constraint: "amplitude is not finite".into(),
            });
        }
        let upper = spec.sojourn(i).support().1;
        let mut g = vec![vec![0.0; panels.nodes.len()]; order + 1];
        let mut l_pow = vec![vec![0.0; grid.len()]; order + 1];
        for (&tau, &w) in rule.nodes().iter().zip(rule.weights()) {
            let profile = Profile::new(regime, &jumps, &panels, grid, tau, upper)?;
            for (k, &x) in profile.jumped.iter().enumerate() {
                let mut p = w;
                for row in g.iter_mut() {
                    row[k] += p;
                    p *= x;
                }
            }
            for (n, &l) in profile.head.iter().enumerate() {
                let mut p = w;
                for row in l_pow.iter_mut() {
                    row[n] += p;
                    p *= l;
                }
            }
        }
        let dist = spec.sojourn(i);
        let density = panels.nodes.iter().map(|&s| dist.density(s)).collect();
        let survival = grid.times().iter().map(|&t| dist.survival(t)).collect();
        Ok(Self {
            panels,
            g,
            l_pow,
            density,
            survival,
        })
    }

    /// `∫_0^{t_n} g_m(s) f_i(s) ds` on the grid.
    fn g_integral(&self, m: usize) -> Vec<f64> {
        let values: Vec<f64> = self.g[m].iter().zip(&self.density).map(|(g, f)| g * f).collect();
        self.panels.cumulative(&values)
    }

    /// Product weights of the kernel `scale · g_m(s) f_i(s)`.
    fn kernel(&self, grid: &TimeGrid, m: usize, scale: f64) -> KernelWeights {
        let values: Vec<f64> = self.g[m]
            .iter()
            .zip(&self.density)
            .map(|(g, f)| scale * g * f)
            .collect();
        KernelWeights::from_nodes(&self.panels, grid, &values)
    }
}

/// Solver bookkeeping attached to every solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeInfo {
    pub step: f64,
    pub steps: usize,
    pub rule: &'static str,
}

impl SchemeInfo {
    fn product_trapezoid(grid: &TimeGrid) -> Self {
        Self {
            step: grid.step(),
            steps: grid.steps(),
            rule: "product trapezoid",
        }
    }
}

/// `μ_i^{(N)}` on the grid for both initial states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSolution {
    pub order: usize,
    pub times: Vec<f64>,
    pub values: [Vec<f64>; 2],
    pub scheme: SchemeInfo,
}

impl MomentSolution {
    pub fn state(&self, i: State) -> &[f64] {
        &self.values[i.index()]
    }
}

/// Refuses orders for which a sojourn law has no finite moment.
fn check_moment_order(spec: &ProcessSpec, order: usize) -> Result<()> {
    if order > MAX_ORDER {
        return Err(Error::Unsupported(format!(
            "moment order {order} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    for s in State::BOTH {
        if let Some(index) = spec.sojourn(s).moment_index() {
            if index <= order as f64 {
                return Err(Error::MomentNotFinite {
                    order,
                    constraint: format!(
                        "sojourn law of state {s} has finite moments only below order {index} \
                         (Pareto needs lambda > {order})"
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Moments of orders `0..=order` by the binomial recursion: the forcing of
/// order `N` is built from the solutions of orders `< N` and the pair is
/// solved again.
pub fn solve_moments(spec: &ProcessSpec, order: usize, grid: &TimeGrid) -> Result<Vec<MomentSolution>> {
    check_moment_order(spec, order)?;
    grid.check_against(spec)?;
    let scheme = SchemeInfo::product_trapezoid(grid);
    let times = grid.times();
    let ones = vec![1.0; grid.len()];
    let mut out = vec![MomentSolution {
        order: 0,
        times: times.clone(),
        values: [ones.clone(), ones],
        scheme: scheme.clone(),
    }];
    if order == 0 {
        return Ok(out);
    }
    let tables = [
        StateTables::new(spec, State::Zero, grid, order)?,
        StateTables::new(spec, State::One, grid, order)?,
    ];
    let kernels = spec_kernels(spec, grid);
    for n_ord in 1..=order {
        let mut forcing: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for i in State::BOTH {
            let tab = &tables[i.index()];
            let other = &out;
            let direct = tab.g_integral(n_ord);
            let mut a: Vec<f64> = (0..grid.len())
                .map(|n| tab.survival[n] * tab.l_pow[n_ord][n] + direct[n])
                .collect();
            for k in 1..n_ord {
                let kernel = tab.kernel(grid, n_ord - k, binomial(n_ord, k));
                let mu = &other[k].values[i.flip().index()];
                for (n, slot) in a.iter_mut().enumerate() {
                    *slot += kernel.convolve(mu, n);
                }
            }
            forcing[i.index()] = a;
        }
        let system = VolterraSystem::new(forcing, kernels.clone(), *grid)?;
        let values = solve_pair(&system)?;
        out.push(MomentSolution {
            order: n_ord,
            times: times.clone(),
            values,
            scheme: scheme.clone(),
        });
    }
    Ok(out)
}

/// Mean from the integrated-by-parts forcing.
pub fn solve_mean(spec: &ProcessSpec, grid: &TimeGrid) -> Result<MomentSolution> {
    grid.check_against(spec)?;
    let forcing = forcing_mean(spec, grid)?;
    let system = VolterraSystem::for_spec(spec, forcing, *grid)?;
    Ok(MomentSolution {
        order: 1,
        times: grid.times(),
        values: solve_pair(&system)?,
        scheme: SchemeInfo::product_trapezoid(grid),
    })
}

/// Mean that keeps track of the previous sojourn.
///
/// After the first switch at `s` the restarted process has previous sojourn
/// exactly `s`, so its conditional mean is `M_j(s, v) = A_j(s, v) + B_j(v)`
/// with `A_j(T, v) = F̄_j(v) l_j(T; v) + ∫_0^v (l_j(T; u) + h_j(u)) f_j(u) du`.
/// `B` solves `B_i = α_i + f_i ⋆ B_{1-i}` with
/// `α_i(t) = ∫_0^t A_{1-i}(s, t - s) f_i(s) ds`, and `μ_i = a_i + B_i`.
/// For memoryless velocities this coincides with [`solve_mean`].
pub fn solve_mean_conditional(spec: &ProcessSpec, grid: &TimeGrid) -> Result<MomentSolution> {
    grid.check_against(spec)?;
    let a = forcing_mean(spec, grid)?;
    let kernels = spec_kernels(spec, grid);
    let len = grid.len();
    // tables[j][m][n] = A_j(s_m, t_n)
    let mut tables: Vec<Vec<Vec<f64>>> = Vec::with_capacity(2);
    for j in State::BOTH {
        let panels = PanelRule::new(grid, &state_breakpoints(spec, j));
        let dist = spec.sojourn(j);
        let upper = dist.support().1;
        let jumps: Vec<f64> = panels.nodes.iter().map(|&u| spec.jump(j).amplitude(u)).collect();
        let density: Vec<f64> = panels.nodes.iter().map(|&u| dist.density(u)).collect();
        let survival: Vec<f64> = grid.times().iter().map(|&t| dist.survival(t)).collect();
        let regime = spec.velocity(j);
        let rows: Result<Vec<Vec<f64>>> = (0..len)
            .map(|m| {
                let p = Profile::new(regime, &jumps, &panels, grid, grid.time(m), upper)?;
                let values: Vec<f64> = p.jumped.iter().zip(&density).map(|(x, f)| x * f).collect();
                let tail = panels.cumulative(&values);
                Ok((0..len).map(|n| survival[n] * p.head[n] + tail[n]).collect())
            })
            .collect();
        tables.push(rows?);
    }
    let mut alpha: [Vec<f64>; 2] = [vec![0.0; len], vec![0.0; len]];
    for i in State::BOTH {
        let kernel = &kernels[i.index()];
        let other = &tables[i.flip().index()];
        for n in 1..len {
            alpha[i.index()][n] = (0..=n).map(|m| kernel.node_weight(m, n) * other[m][n - m]).sum();
        }
    }
    let b = solve_pair(&VolterraSystem::new(alpha, kernels, *grid)?)?;
    let values = [
        a[0].iter().zip(&b[0]).map(|(x, y)| x + y).collect(),
        a[1].iter().zip(&b[1]).map(|(x, y)| x + y).collect(),
    ];
    Ok(MomentSolution {
        order: 1,
        times: grid.times(),
        values,
        scheme: SchemeInfo::product_trapezoid(grid),
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Which variance forcing to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceForm {
    /// Includes the spread `Var_T l_i(T; s)` caused by a random previous
    /// sojourn. Consistent with the second moment for every specification.
    #[default]
    Complete,
    /// Squared deviations of the averaged displacement only; exact when the
    /// velocities do not depend on `T`.
    AveragedDisplacement,
}

/// Means and variances solved through the variance system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceSolution {
    pub times: Vec<f64>,
    pub mean: [Vec<f64>; 2],
    pub variance: [Vec<f64>; 2],
    pub form: VarianceForm,
    pub scheme: SchemeInfo,
}

/// `σ_i = b_i + f_i ⋆ σ_{1-i}` with the forcing `b_i` built from the means.
pub fn solve_variance(spec: &ProcessSpec, grid: &TimeGrid) -> Result<VarianceSolution> {
    solve_variance_with(spec, grid, VarianceForm::Complete)
}

pub fn solve_variance_with(spec: &ProcessSpec, grid: &TimeGrid, form: VarianceForm) -> Result<VarianceSolution> {
    check_moment_order(spec, 2)?;
    grid.check_against(spec)?;
    let tables = [
        StateTables::new(spec, State::Zero, grid, 2)?,
        StateTables::new(spec, State::One, grid, 2)?,
    ];
    let kernels = spec_kernels(spec, grid);
    let mean_forcing = [
        pointwise_mean_forcing(&tables[0], grid),
        pointwise_mean_forcing(&tables[1], grid),
    ];
    let mean = solve_pair(&VolterraSystem::new(mean_forcing, kernels.clone(), *grid)?)?;

    let mut forcing: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for i in State::BOTH {
        let tab = &tables[i.index()];
        let kernel = &kernels[i.index()];
        let mu = &mean[i.index()];
        let other = &mean[i.flip().index()];
        let other_sq: Vec<f64> = other.iter().map(|v| v * v).collect();
        let g2_int = match form {
            VarianceForm::Complete => tab.g_integral(2),
            VarianceForm::AveragedDisplacement => {
                let values: Vec<f64> = tab.g[1]
                    .iter()
                    .zip(&tab.density)
                    .map(|(g, f)| g * g * f)
                    .collect();
                tab.panels.cumulative(&values)
            }
        };
        let g1_int = tab.g_integral(1);
        let g1_kernel = tab.kernel(grid, 1, 1.0);
        let b: Vec<f64> = (0..grid.len())
            .map(|n| {
                let m = mu[n];
                let lbar = tab.l_pow[1][n];
                let spread = match form {
                    VarianceForm::Complete => tab.l_pow[2][n] - lbar * lbar,
                    VarianceForm::AveragedDisplacement => 0.0,
                };
                let head = tab.survival[n] * ((lbar - m).powi(2) + spread);
                let cdf = 1.0 - tab.survival[n];
                let tail = g2_int[n] + 2.0 * g1_kernel.convolve(other, n) - 2.0 * m * g1_int[n]
                    + kernel.convolve(&other_sq, n)
                    - 2.0 * m * kernel.convolve(other, n)
                    + m * m * cdf;
                head + tail
            })
            .collect();
        forcing[i.index()] = b;
    }
    let variance = solve_pair(&VolterraSystem::new(forcing, kernels, *grid)?)?;
    Ok(VarianceSolution {
        times: grid.times(),
        mean,
        variance,
        form,
        scheme: SchemeInfo::product_trapezoid(grid),
    })
}

fn pointwise_mean_forcing(tab: &StateTables, grid: &TimeGrid) -> Vec<f64> {
    let direct = tab.g_integral(1);
    (0..grid.len())
        .map(|n| tab.survival[n] * tab.l_pow[1][n] + direct[n])
        .collect()
}

type Matrix2 = [[f64; 2]; 2];

/// Matrices of the exponential case: `L` (off-diagonal rates) and the
/// generator `Λ = L - diag(λ)`, with `exp(tΛ) = I + φ(t) Λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentialCaseMatrices {
    pub lambda: [f64; 2],
    pub l: Matrix2,
    pub generator: Matrix2,
    /// `λ_0 + λ_1`.
    pub two_lambda: f64,
}

impl ExponentialCaseMatrices {
    pub fn new(lambda: [f64; 2]) -> Result<Self> {
        crate::error::positive("lambda0", lambda[0])?;
        crate::error::positive("lambda1", lambda[1])?;
        Ok(Self {
            lambda,
            l: [[0.0, lambda[0]], [lambda[1], 0.0]],
            generator: [[-lambda[0], lambda[0]], [lambda[1], -lambda[1]]],
            two_lambda: lambda[0] + lambda[1],
        })
    }

    /// Refuses specifications whose sojourns are not exponential.
    pub fn from_spec(spec: &ProcessSpec) -> Result<Self> {
        let rates = spec.exponential_rates().ok_or_else(|| {
            Error::Unsupported("the closed form needs exponential sojourns in both states".into())
        })?;
        Self::new(rates)
    }

    /// `φ(t) = (1 - e^{-2λt}) / (2λ)`.
    pub fn phi(&self, t: f64) -> f64 {
        -(-self.two_lambda * t).exp_m1() / self.two_lambda
    }

    /// `exp(tΛ)` in closed form.
    pub fn exp_generator(&self, t: f64) -> Matrix2 {
        let p = self.phi(t);
        let g = &self.generator;
        [
            [1.0 + p * g[0][0], p * g[0][1]],
            [p * g[1][0], 1.0 + p * g[1][1]],
        ]
    }
}

/// `μ(t) = a(t) + ∫_0^t (I + φ(t - s)Λ) L a(s) ds`, by the trapezoidal rule
/// on the grid.
pub fn closed_form_moments(forcing: &[Vec<f64>; 2], lambdas: [f64; 2], grid: &TimeGrid) -> Result<[Vec<f64>; 2]> {
    let m = ExponentialCaseMatrices::new(lambdas)?;
    for a in forcing {
        if a.len() != grid.len() {
            return Err(Error::InvalidParameter {
                name: "forcing",
                value: a.len() as f64,
                constraint: format!("must have {} grid values", grid.len()),
            });
        }
    }
    let la: Vec<[f64; 2]> = (0..grid.len())
        .map(|n| [m.l[0][1] * forcing[1][n], m.l[1][0] * forcing[0][n]])
        .collect();
    let h = grid.step();
    let mut out = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
    for n in 0..grid.len() {
        let mut acc = [0.0, 0.0];
        for j in 0..=n {
            let w = if j == 0 || j == n { 0.5 * h } else { h };
            if n == 0 {
                break;
            }
            let e = m.exp_generator(grid.time(n - j));
            acc[0] += w * (e[0][0] * la[j][0] + e[0][1] * la[j][1]);
            acc[1] += w * (e[1][0] * la[j][0] + e[1][1] * la[j][1]);
        }
        out[0][n] = forcing[0][n] + acc[0];
        out[1][n] = forcing[1][n] + acc[1];
    }
    Ok(out)
}

/// Handling of interpolation queries outside the x-grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OffGrid {
    /// Any query outside the grid is an error.
    Fail,
    /// Linear extrapolation up to `margin` beyond either end, error beyond.
    Extrapolate { margin: f64 },
}

/// `u_i(x, t) = E g(x + X_i(t))` on an `(x, t)` grid. `values[i][n][k]` is
/// the value at `x_grid[k]` and `t_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectationSurface {
    pub x_grid: Vec<f64>,
    pub times: Vec<f64>,
    pub values: [Vec<Vec<f64>>; 2],
}

impl ExpectationSurface {
    /// Linear interpolation in `x` at grid time index `n`.
    pub fn at(&self, i: State, n: usize, x: f64) -> Result<f64> {
        let line = Line::new(&self.x_grid);
        line.eval(&self.values[i.index()][n], x, OffGrid::Fail)
    }
}

struct Line<'a> {
    x: &'a [f64],
    uniform: Option<f64>,
}

impl<'a> Line<'a> {
    fn new(x: &'a [f64]) -> Self {
        let h = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
        let uniform = x
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12 * h.abs())
            .then_some(h);
        Self { x, uniform }
    }

    fn eval(&self, y: &[f64], q: f64, policy: OffGrid) -> Result<f64> {
        let n = self.x.len();
        let (lo, hi) = (self.x[0], self.x[n - 1]);
        if q < lo || q > hi {
            let allowed = match policy {
                OffGrid::Fail => false,
                OffGrid::Extrapolate { margin } => q >= lo - margin && q <= hi + margin,
            };
            if !allowed {
                return Err(Error::Domain {
                    what: "solve_expectation",
                    value: q,
                    constraint: format!("interpolation point outside the x-grid [{lo}, {hi}]; widen the grid"),
                });
            }
        }
        let k = match self.uniform {
            Some(h) => (((q - lo) / h).floor().max(0.0) as usize).min(n - 2),
            None => (self.x.partition_point(|&v| v <= q).max(1) - 1).min(n - 2),
        };
        let w = (q - self.x[k]) / (self.x[k + 1] - self.x[k]);
        Ok(y[k] + w * (y[k + 1] - y[k]))
    }
}

/// Options for [`solve_expectation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectationOptions {
    pub off_grid: OffGrid,
    pub execution: crate::simulate::Execution,
    /// Tolerance of the fixed-point iteration on the implicit term.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ExpectationOptions {
    fn default() -> Self {
        Self {
            off_grid: OffGrid::Fail,
            execution: crate::simulate::Execution::Parallel,
            tolerance: 1e-13,
            max_iterations: 200,
        }
    }
}

/// Solves for `u_i(x, t) = E g(x + X_i(t))` by time-stepping:
/// `u_i(x, t) = G_i(x, t) + ∫_0^t f_i(s) E u_{1-i}(x + l_i(T; s) + h_i(s), t - s) ds`
/// with `G_i(x, t) = F̄_i(t) E g(x + l_i(T; t))`. The `s`-integral uses the
/// product trapezoid weights of `f_i`, the unknown surface is interpolated
/// linearly in `x`, and the implicit `s = 0` term is resolved by fixed-point
/// iteration.
pub fn solve_expectation<G>(
    spec: &ProcessSpec,
    payoff: G,
    x_grid: &[f64],
    grid: &TimeGrid,
    options: &ExpectationOptions,
) -> Result<ExpectationSurface>
where
    G: Fn(f64) -> f64 + Sync,
{
    crate::simulate::check_grid(x_grid)?;
    grid.check_against(spec)?;
    let kernels = spec_kernels(spec, grid);
    let line = Line::new(x_grid);
    let n_t = grid.len();
    let nx = x_grid.len();

    // shifts[i][j] = (weight, l_i(T; s_j) + h_i(s_j)) over T nodes; heads[i][n] likewise for l_i(T; t_n).
    let mut shifts: [Vec<Vec<(f64, f64)>>; 2] = [Vec::new(), Vec::new()];
    let mut heads: [Vec<Vec<(f64, f64)>>; 2] = [Vec::new(), Vec::new()];
    for i in State::BOTH {
        let rule = previous_sojourn_rule(spec, i)?;
        let regime = spec.velocity(i);
        let upper = spec.sojourn(i).support().1;
        let mut s_rows = vec![Vec::with_capacity(rule.len()); n_t];
        let mut h_rows = vec![Vec::with_capacity(rule.len()); n_t];
        for (&tau, &w) in rule.nodes().iter().zip(rule.weights()) {
            let mut l = 0.0;
            for j in 0..n_t {
                // Past the support end the displacement is frozen; such
                // nodes carry no sojourn mass.
                if j > 0 && grid.time(j) < upper {
                    l += regime.displacement(tau, grid.time(j - 1), grid.time(j))?;
                }
                let h = spec.jump(i).amplitude(grid.time(j));
                if !h.is_finite() {
                    return Err(Error::Domain {
                        what: "jump amplitude",
                        value: grid.time(j),
                        constraint: "amplitude is not finite".into(),
                    });
                }
                s_rows[j].push((w, l + h));
                h_rows[j].push((w, l));
            }
        }
        shifts[i.index()] = s_rows;
        heads[i.index()] = h_rows;
    }

    let g_at = |x: f64| -> Result<f64> {
        let v = payoff(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain {
                what: "payoff",
                value: x,
                constraint: format!("payoff is {v}"),
            })
        }
    };

    let initial: Vec<f64> = x_grid.iter().map(|&x| g_at(x)).collect::<Result<_>>()?;
    let mut values: [Vec<Vec<f64>>; 2] = [vec![initial.clone()], vec![initial]];

    for n in 1..n_t {
        // Explicit part: G_i plus every j >= 1 term.
        let mut explicit: [Vec<f64>; 2] = [vec![0.0; nx], vec![0.0; nx]];
        for i in State::BOTH {
            let ii = i.index();
            let other = &values[i.flip().index()];
            let survival = spec.sojourn(i).survival(grid.time(n));
            let kernel = &kernels[ii];
            let row = |k: usize| -> Result<f64> {
                let x = x_grid[k];
                let mut acc = 0.0;
                if survival > 0.0 {
                    let mut gsum = 0.0;
                    for &(w, l) in &heads[ii][n] {
                        gsum += w * g_at(x + l)?;
                    }
                    acc += survival * gsum;
                }
                for j in 1..=n {
                    let c = kernel.node_weight(j, n);
                    if c == 0.0 {
                        continue;
                    }
                    let level = &other[n - j];
                    let mut e = 0.0;
                    for &(w, d) in &shifts[ii][j] {
                        e += w * line.eval(level, x + d, options.off_grid)?;
                    }
                    acc += c * e;
                }
                Ok(acc)
            };
            explicit[ii] = map_nodes(nx, options.execution, row)?;
        }
        // Implicit j = 0 term: u_i(x, t_n) += α^i_0 u_{1-i}(x + h_i(0), t_n).
        let mut current = [values[0][n - 1].clone(), values[1][n - 1].clone()];
        let mut converged = false;
        for _ in 0..options.max_iterations {
            let mut next: [Vec<f64>; 2] = [vec![0.0; nx], vec![0.0; nx]];
            for i in State::BOTH {
                let ii = i.index();
                let c = kernels[ii].node_weight(0, n);
                let other = &current[i.flip().index()];
                for k in 0..nx {
                    let mut e = 0.0;
                    if c != 0.0 {
                        for &(w, d) in &shifts[ii][0] {
                            e += w * line.eval(other, x_grid[k] + d, options.off_grid)?;
                        }
                    }
                    next[ii][k] = explicit[ii][k] + c * e;
                }
            }
            let change = (0..2)
                .flat_map(|i| current[i].iter().zip(&next[i]).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            let scale = next
                .iter()
                .flat_map(|v| v.iter())
                .fold(1.0f64, |m, v| m.max(v.abs()));
            current = next;
            if change <= options.tolerance * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Solver(format!(
                "implicit step at t = {} did not converge",
                grid.time(n)
            )));
        }
        let [c0, c1] = current;
        values[0].push(c0);
        values[1].push(c1);
    }
    Ok(ExpectationSurface {
        x_grid: x_grid.to_vec(),
        times: grid.times(),
        values,
    })
}

fn map_nodes<F>(n: usize, execution: crate::simulate::Execution, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        crate::simulate::Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Sup-norm of a pair of grid functions.
pub fn sup_norm(values: &[Vec<f64>; 2]) -> f64 {
    values
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Integral of a grid function by the trapezoidal rule (used by callers that
/// post-process solutions).
pub fn trapezoid(values: &[f64], grid: &TimeGrid) -> f64 {
    *quadrature::cumulative_trapezoid(values, grid.step())
        .last()
        .unwrap_or(&0.0)
}
