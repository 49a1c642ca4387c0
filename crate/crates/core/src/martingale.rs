//! Martingale conditions: the balance identity `F̄_i c̄_i + h_i f_i ≡ 0`, the
//! ratio form `c̄_i / h_i = -f_i / F̄_i`, sojourn laws reconstructed from a
//! ratio, calibrated specifications and measure-change plans.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::distributions::FamilySpec;
use crate::error::{Error, Result};
use crate::model::{JumpRegime, ProcessSpec, SojournDistribution, State, VelocityRegime};
use crate::quadrature::{self, ExpectationRule};
use crate::simulate::GirsanovPlan;
use crate::volterra;

/// Threshold on the balance residual.
pub const BALANCE_TOLERANCE: f64 = 1e-8;
/// The divergence heuristic asks for `∫(-r) >= ln(1 / DIVERGENCE_EPS)`.
pub const DIVERGENCE_EPS: f64 = 1e-10;
const HEURISTIC_DECADES: usize = 12;

/// Same-sign points of `h_i` and `c̄_i` for one state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignDiagnostic {
    pub state: State,
    /// Grid points where both are nonzero and share a sign.
    pub same_sign_points: usize,
    pub first_same_sign: Option<f64>,
}

impl SignDiagnostic {
    pub fn fired(&self) -> bool {
        self.same_sign_points > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub grid: Vec<f64>,
    /// `F̄_i c̄_i + h_i f_i` at the grid points; `NaN` where the density is
    /// infinite (listed in `singular_points`).
    pub residuals: [Vec<f64>; 2],
    pub max_abs_residual: f64,
    pub is_martingale: bool,
    pub tolerance: f64,
    pub signs: [SignDiagnostic; 2],
    pub singular_points: Vec<f64>,
}

/// Evaluates the balance identity on `grid`.
pub fn balance_residual(spec: &ProcessSpec, grid: &[f64]) -> Result<BalanceReport> {
    if grid.is_empty() || grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidParameter {
            name: "grid",
            value: grid.len() as f64,
            constraint: "needs at least one finite time >= 0".into(),
        });
    }
    let mut residuals: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut signs = Vec::with_capacity(2);
    let mut singular = Vec::new();
    let mut max_abs = 0.0f64;
    for i in State::BOTH {
        let rule = volterra::previous_sojourn_rule(spec, i)?;
        let dist = spec.sojourn(i);
        let mut same = 0;
        let mut first = None;
        let mut row = Vec::with_capacity(grid.len());
        for &t in grid {
            let cbar = rule.expect(|tau| spec.velocity(i).velocity(tau, t));
            let h = spec.jump(i).amplitude(t);
            let f = dist.density(t);
            let survival = dist.survival(t);
            let r = survival * cbar + h * f;
            // At the end of a bounded support the hazard is infinite, like a
            // density singularity.
            if !f.is_finite() || (survival == 0.0 && f > 0.0) {
                singular.push(t);
                row.push(f64::NAN);
            } else if !r.is_finite() {
                return Err(Error::Quadrature {
                    lower: 0.0,
                    upper: t,
                    reason: format!("balance residual of state {i} is {r}"),
                });
            } else {
                max_abs = max_abs.max(r.abs());
                row.push(r);
            }
            if cbar != 0.0 && h != 0.0 && cbar.signum() == h.signum() {
                same += 1;
                first.get_or_insert(t);
            }
        }
        residuals[i.index()] = row;
        signs.push(SignDiagnostic {
            state: i,
            same_sign_points: same,
            first_same_sign: first,
        });
    }
    singular.sort_by(f64::total_cmp);
    singular.dedup();
    let signs: [SignDiagnostic; 2] = [signs[0].clone(), signs[1].clone()];
    Ok(BalanceReport {
        grid: grid.to_vec(),
        residuals,
        max_abs_residual: max_abs,
        is_martingale: max_abs < BALANCE_TOLERANCE,
        tolerance: BALANCE_TOLERANCE,
        signs,
        singular_points: singular,
    })
}

type RatioFn = dyn Fn(f64) -> f64 + Send + Sync;

/// How divergence of `∫_0^∞ (-r)` is established.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// Known in closed form for the family.
    Analytic(bool),
    /// Checked numerically over a long horizon.
    Heuristic,
}

/// The pair of ratios `r_i = c̄_i / h_i` with the interval on which each must
/// be strictly negative.
#[derive(Clone)]
pub struct RatioSpec {
    ratio: [Arc<RatioFn>; 2],
    support: [(f64, f64); 2],
    divergence: [Divergence; 2],
}

impl fmt::Debug for RatioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RatioSpec")
            .field("support", &self.support)
            .field("divergence", &self.divergence)
            .finish()
    }
}

impl RatioSpec {
    /// User ratios on `[0, ∞)`; divergence is checked heuristically.
    pub fn new<F0, F1>(r0: F0, r1: F1) -> Self
    where
        F0: Fn(f64) -> f64 + Send + Sync + 'static,
        F1: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            ratio: [Arc::new(r0), Arc::new(r1)],
            support: [(0.0, f64::INFINITY); 2],
            divergence: [Divergence::Heuristic; 2],
        }
    }

    pub fn with_support(mut self, i: State, lower: f64, upper: f64) -> Self {
        self.support[i.index()] = (lower, upper);
        self
    }

    /// Closed-form ratios of two catalog families.
    pub fn from_families(families: [FamilySpec; 2]) -> Result<Self> {
        for f in &families {
            f.validate()?;
        }
        let make = |f: FamilySpec| -> Arc<RatioFn> { Arc::new(move |t| f.martingale_ratio(t).unwrap_or(f64::NAN)) };
        Ok(Self {
            ratio: [make(families[0]), make(families[1])],
            support: [families[0].ratio_support(), families[1].ratio_support()],
            divergence: [
                Divergence::Analytic(families[0].ratio_integral_diverges()),
                Divergence::Analytic(families[1].ratio_integral_diverges()),
            ],
        })
    }

    pub fn ratio(&self, i: State, t: f64) -> f64 {
        (self.ratio[i.index()])(t)
    }

    pub fn support(&self, i: State) -> (f64, f64) {
        self.support[i.index()]
    }

    pub fn divergence(&self, i: State) -> Divergence {
        self.divergence[i.index()]
    }
}

/// Sojourn law with `F̄(t) = exp ∫_0^t r` and `f = -r F̄`.
///
/// `∫ r` is tabulated at the construction grid by adaptive quadrature
/// panel by panel; off-grid values add one adaptive integral from the
/// nearest node below.
#[derive(Clone)]
pub struct RatioDistribution {
    ratio: Arc<RatioFn>,
    nodes: Vec<f64>,
    cumulative: Vec<f64>,
    support: (f64, f64),
}

impl fmt::Debug for RatioDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RatioDistribution")
            .field("support", &self.support)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

const RATIO_TOL: f64 = 1e-13;

fn integrate_ratio(r: &RatioFn, a: f64, b: f64) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    quadrature::adaptive(r, a, b, RATIO_TOL, quadrature::MAX_SUBDIVISIONS)
}

impl RatioDistribution {
    fn new(ratio: Arc<RatioFn>, grid: &[f64], support: (f64, f64)) -> Result<Self> {
        let mut nodes = vec![0.0];
        nodes.extend(grid.iter().copied().filter(|&t| t > 0.0 && t < support.1));
        if support.0 > 0.0 && support.0 < support.1 {
            nodes.push(support.0);
        }
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        let mut cumulative = Vec::with_capacity(nodes.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in nodes.windows(2) {
            acc += integrate_ratio(ratio.as_ref(), w[0], w[1])?;
            cumulative.push(acc);
        }
        Ok(Self {
            ratio,
            nodes,
            cumulative,
            support,
        })
    }

    /// `∫_0^t r`.
    pub fn integrated_ratio(&self, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Ok(0.0);
        }
        if t >= self.support.1 {
            return Ok(f64::NEG_INFINITY);
        }
        let k = self.nodes.partition_point(|&v| v <= t) - 1;
        Ok(self.cumulative[k] + integrate_ratio(self.ratio.as_ref(), self.nodes[k], t)?)
    }

    pub fn ratio(&self, t: f64) -> f64 {
        (self.ratio)(t)
    }
}

impl SojournDistribution for RatioDistribution {
    fn density(&self, t: f64) -> f64 {
        if t < self.support.0 || t >= self.support.1 || t < 0.0 {
            return 0.0;
        }
        -self.ratio(t) * self.survival(t)
    }

    fn survival(&self, t: f64) -> f64 {
        self.log_survival(t).exp()
    }

    fn cdf(&self, t: f64) -> f64 {
        -self.log_survival(t).exp_m1()
    }

    fn log_survival(&self, t: f64) -> f64 {
        self.integrated_ratio(t).unwrap_or(f64::NAN)
    }

    fn support(&self) -> (f64, f64) {
        self.support
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::new();
        if self.support.0 > 0.0 {
            b.push(self.support.0);
        }
        if self.support.1.is_finite() {
            b.push(self.support.1);
        }
        b
    }
}

/// Outcome of the numerical divergence check of `∫(-r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergenceCheck {
    pub method: Divergence,
    /// `∫(-r)` over the checked horizon (heuristic only).
    pub integral: Option<f64>,
    pub horizon: Option<f64>,
    pub passed: bool,
}

/// Reconstructed pair of sojourn laws.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub distributions: [Arc<RatioDistribution>; 2],
    pub divergence: [DivergenceCheck; 2],
    pub warnings: Vec<String>,
}

impl Reconstruction {
    pub fn as_sojourns(&self) -> [Arc<dyn SojournDistribution>; 2] {
        [self.distributions[0].clone(), self.distributions[1].clone()]
    }
}

fn check_negative(ratio: &RatioSpec, i: State, grid: &[f64]) -> Result<()> {
    let (lower, upper) = ratio.support(i);
    for &t in grid.iter().filter(|&&t| t > lower && t < upper) {
        let r = ratio.ratio(i, t);
        if !(r < 0.0) {
            return Err(Error::ConditionViolated(format!(
                "ratio of state {i} is {r} at t = {t}; it must be negative (jumps opposing the mean velocity)"
            )));
        }
    }
    Ok(())
}

fn divergence_check(ratio: &RatioSpec, i: State, grid_end: f64) -> Result<DivergenceCheck> {
    match ratio.divergence(i) {
        Divergence::Analytic(passed) => Ok(DivergenceCheck {
            method: Divergence::Analytic(passed),
            integral: None,
            horizon: None,
            passed,
        }),
        Divergence::Heuristic => {
            // Horizons grow by decades from 10x the grid end until the
            // integral clears ln(1/eps) or the support ends.
            let (lower, upper) = ratio.support(i);
            let r = |t: f64| ratio.ratio(i, t);
            let target = (1.0 / DIVERGENCE_EPS).ln();
            let mut start = 0.0;
            let mut integral = 0.0;
            let mut horizon = (10.0 * grid_end).max(lower + 1.0);
            for _ in 0..=HEURISTIC_DECADES {
                let end = horizon.min(upper);
                integral -= quadrature::adaptive(r, start, end, 1e-9, quadrature::MAX_SUBDIVISIONS)
                    .unwrap_or(f64::NEG_INFINITY);
                start = end;
                if integral >= target || end >= upper || !integral.is_finite() {
                    break;
                }
                horizon *= 10.0;
            }
            Ok(DivergenceCheck {
                method: Divergence::Heuristic,
                integral: Some(integral),
                horizon: Some(start),
                passed: integral >= target,
            })
        }
    }
}

/// Builds `F̄_i = exp ∫_0^t r_i`, `f_i = -r_i F̄_i` after checking that the
/// ratios are negative on `grid`. A ratio whose integral stays bounded
/// yields a defective law and a warning.
pub fn density_from_ratio(ratio: &RatioSpec, grid: &[f64]) -> Result<Reconstruction> {
    crate::simulate::check_grid(grid)?;
    let grid_end = grid[grid.len() - 1];
    let mut dists = Vec::with_capacity(2);
    let mut checks = Vec::with_capacity(2);
    let mut warnings = Vec::new();
    for i in State::BOTH {
        check_negative(ratio, i, grid)?;
        let check = divergence_check(ratio, i, grid_end)?;
        if !check.passed {
            warnings.push(match check.method {
                Divergence::Analytic(_) => format!(
                    "state {i}: the ratio integral converges, so the survival function does not vanish"
                ),
                Divergence::Heuristic => format!(
                    "state {i}: heuristic check found ∫(-r) = {:.6} over [0, {}] below ln(1e10); \
                     the survival function may not vanish",
                    check.integral.unwrap_or(f64::NAN),
                    check.horizon.unwrap_or(f64::NAN)
                ),
            });
        }
        checks.push(check);
        dists.push(Arc::new(RatioDistribution::new(
            ratio.ratio[i.index()].clone(),
            grid,
            ratio.support(i),
        )?));
    }
    Ok(Reconstruction {
        distributions: [dists[0].clone(), dists[1].clone()],
        divergence: [checks[0], checks[1]],
        warnings,
    })
}

/// Default roundtrip grid: `[0, 5 × characteristic time]`, cut to the
/// support.
pub fn roundtrip_grid(family: &FamilySpec, points: usize) -> Result<Vec<f64>> {
    let fam = family.build()?;
    let (lower, upper) = fam.support();
    let end = (5.0 * fam.characteristic_time()).min(upper);
    let start = lower;
    let n = points.max(2);
    Ok((0..n)
        .map(|k| start + (end - start) * k as f64 / (n - 1) as f64)
        .filter(|&t| t < upper)
        .collect())
}

/// Max abs difference between a family's density and the density rebuilt
/// from its closed-form ratio, over the grid points inside the support where the
/// density is finite.
pub fn roundtrip_check(family: &FamilySpec, grid: &[f64]) -> Result<f64> {
    let fam = family.build()?;
    let ratio = RatioSpec::from_families([*family, *family])?;
    let rebuilt = density_from_ratio(&ratio, grid)?;
    let dist = &rebuilt.distributions[0];
    let (lower, upper) = fam.support();
    let mut worst = 0.0f64;
    for &t in grid {
        if t <= lower || t >= upper {
            continue;
        }
        let want = fam.density(t);
        if !want.is_finite() {
            continue;
        }
        worst = worst.max((dist.density(t) - want).abs());
    }
    Ok(worst)
}

/// Plan that makes the exponential-time process with base intensities `μ`
/// switch at the target intensities `λ`.
pub fn build_girsanov_plan(base: [f64; 2], target: [f64; 2]) -> Result<GirsanovPlan> {
    GirsanovPlan::new(base, target)
}

fn calibrated_state(dist: Arc<dyn SojournDistribution>, ratio: Arc<RatioFn>, amplitude: f64) -> (VelocityRegime, JumpRegime) {
    let breaks = dist.breakpoints();
    let d = dist.clone();
    let velocity = VelocityRegime::memoryless(move |t| {
        let r = ratio(t);
        if r.is_finite() {
            amplitude * r
        } else {
            0.0
        }
    })
    .with_displacement(move |_, u, t| amplitude * (d.log_survival(t) - d.log_survival(u)))
    .with_breakpoints(breaks);
    (velocity, JumpRegime::constant(amplitude))
}

/// Martingale specification for two catalog families: velocity
/// `H_i r_i(t)` with the catalog ratio `r_i`, constant jump `H_i`.
pub fn calibrated_spec(families: [FamilySpec; 2], amplitudes: [f64; 2], initial: State) -> Result<ProcessSpec> {
    let ratios = RatioSpec::from_families(families)?;
    let sojourn = [families[0].build_arc()?, families[1].build_arc()?];
    calibrated_with(sojourn, [ratios.ratio[0].clone(), ratios.ratio[1].clone()], amplitudes, initial)
}

/// Martingale specification for arbitrary sojourn laws, with the ratio
/// `-f_i / F̄_i` taken from the laws themselves.
pub fn calibrated_spec_for(sojourn: [Arc<dyn SojournDistribution>; 2], amplitudes: [f64; 2], initial: State) -> Result<ProcessSpec> {
    let hazard = |d: Arc<dyn SojournDistribution>| -> Arc<RatioFn> {
        Arc::new(move |t| {
            let s = d.survival(t);
            if s > 0.0 {
                -d.density(t) / s
            } else {
                f64::NAN
            }
        })
    };
    let ratios = [hazard(sojourn[0].clone()), hazard(sojourn[1].clone())];
    calibrated_with(sojourn, ratios, amplitudes, initial)
}

fn calibrated_with(
    sojourn: [Arc<dyn SojournDistribution>; 2],
    ratios: [Arc<RatioFn>; 2],
    amplitudes: [f64; 2],
    initial: State,
) -> Result<ProcessSpec> {
    for (k, h) in amplitudes.iter().enumerate() {
        if !(h.is_finite() && *h != 0.0) {
            return Err(Error::InvalidParameter {
                name: if k == 0 { "h0" } else { "h1" },
                value: *h,
                constraint: "jump amplitude must be finite and nonzero".into(),
            });
        }
    }
    let (v0, j0) = calibrated_state(sojourn[0].clone(), ratios[0].clone(), amplitudes[0]);
    let (v1, j1) = calibrated_state(sojourn[1].clone(), ratios[1].clone(), amplitudes[1]);
    Ok(ProcessSpec::new([v0, v1], [j0, j1], sojourn, initial))
}

/// Balance identity and Volterra mean of one specification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub balance: BalanceReport,
    /// Sup norm of the Volterra means on the time grid.
    pub mean_sup_norm: f64,
    pub mean_is_zero: bool,
    pub mean_tolerance: f64,
}

pub const MEAN_TOLERANCE: f64 = 1e-6;

/// Balance identity on the grid nodes plus the Volterra mean.
pub fn check_spec(spec: &ProcessSpec, grid: &volterra::TimeGrid) -> Result<MartingaleReport> {
    let balance = balance_residual(spec, &grid.times())?;
    let mean = volterra::solve_mean(spec, grid)?;
    let sup = volterra::sup_norm(&mean.values);
    Ok(MartingaleReport {
        balance,
        mean_sup_norm: sup,
        mean_is_zero: sup < MEAN_TOLERANCE,
        mean_tolerance: MEAN_TOLERANCE,
    })
}

/// Separable velocity `c_i(τ, t) = γ_i(τ) κ_i(t)` with jumps `h_i = ρ_i κ_i`.
#[derive(Clone)]
pub struct SeparableRegime {
    pub gamma: Arc<RatioFn>,
    pub rho: f64,
}

impl fmt::Debug for SeparableRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeparableRegime").field("rho", &self.rho).finish()
    }
}

/// `ρ = h / κ` when it is constant on `grid` (relative tolerance `tol`).
pub fn separable_jump_ratio<K, H>(kappa: K, jump: H, grid: &[f64], tol: f64) -> Result<f64>
where
    K: Fn(f64) -> f64,
    H: Fn(f64) -> f64,
{
    let mut rho = None;
    for &t in grid {
        let k = kappa(t);
        let h = jump(t);
        if k == 0.0 {
            if h != 0.0 {
                return Err(Error::ConditionViolated(format!(
                    "jump {h} at t = {t} where the velocity profile vanishes"
                )));
            }
            continue;
        }
        let r = h / k;
        match rho {
            None => rho = Some(r),
            Some(r0) if (r - r0).abs() > tol * r0.abs().max(f64::MIN_POSITIVE) => {
                return Err(Error::ConditionViolated(format!(
                    "jump and velocity profile are not proportional: h/κ = {r0} and {r} (t = {t})"
                )));
            }
            _ => {}
        }
    }
    rho.ok_or_else(|| Error::ConditionViolated("velocity profile vanishes on the whole grid".into()))
}

/// `E γ(T)` for `T ~ Exp(λ)`.
fn exponential_mean(rule: &ExpectationRule, gamma: &RatioFn, lambda: f64) -> f64 {
    rule.expect(|u| gamma(u / lambda))
}

/// Intensities `(λ_0, λ_1)` for which the separable regimes satisfy the
/// exponential balance equations
/// `λ_1 ∫ e^{-λ_1 τ} c_0(τ, t) dτ = -λ_0 h_0(t)` and
/// `λ_0 ∫ e^{-λ_0 τ} c_1(τ, t) dτ = -λ_1 h_1(t)`.
///
/// With `m_i(λ) = E_λ γ_i(T)` these read `m_0(λ_1) = -ρ_0 λ_0` and
/// `m_1(λ_0) = -ρ_1 λ_1`; eliminating `λ_0` leaves one equation in `λ_1`,
/// which is scanned on `[lambda_range.0, lambda_range.1]` and refined by
/// bisection. Every positive solution found is returned.
pub fn solve_separable_intensities(regimes: &[SeparableRegime; 2], lambda_range: (f64, f64)) -> Result<Vec<[f64; 2]>> {
    let (lo, hi) = lambda_range;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "lambda_range",
            value: lo,
            constraint: "requires 0 < lower < upper < inf".into(),
        });
    }
    let unit = crate::distributions::FamilySpec::Exponential { lambda: 1.0 }.build()?;
    let rule = ExpectationRule::for_distribution(&unit)?;
    let [r0, r1] = regimes;
    let lambda0_of = |l1: f64| -exponential_mean(&rule, r0.gamma.as_ref(), l1) / r0.rho;
    let residual = |l1: f64| -> f64 {
        let l0 = lambda0_of(l1);
        if !(l0 > 0.0) {
            return f64::NAN;
        }
        exponential_mean(&rule, r1.gamma.as_ref(), l0) + r1.rho * l1
    };
    let scan = 2000;
    let ratio = (hi / lo).powf(1.0 / scan as f64);
    let mut out = Vec::new();
    let mut prev_x = lo;
    let mut prev_f = residual(lo);
    for k in 1..=scan {
        let x = lo * ratio.powi(k as i32);
        let fx = residual(x);
        if prev_f.is_finite() && fx.is_finite() {
            if prev_f == 0.0 {
                out.push(prev_x);
            } else if prev_f.signum() != fx.signum() {
                let (mut a, mut b, mut fa) = (prev_x, x, prev_f);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    let fm = residual(m);
                    if fm == 0.0 || (b - a) <= 1e-15 * m {
                        a = m;
                        b = m;
                        break;
                    }
                    if fm.signum() == fa.signum() {
                        a = m;
                        fa = fm;
                    } else {
                        b = m;
                    }
                }
                out.push(0.5 * (a + b));
            }
        }
        prev_x = x;
        prev_f = fx;
    }
    Ok(out
        .into_iter()
        .map(|l1| [lambda0_of(l1), l1])
        .filter(|l| l[0] > 0.0 && l[1] > 0.0)
        .collect())
}
