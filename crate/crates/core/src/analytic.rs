//! Closed-form transition densities for constant velocities `c_0 > c_1`,
//! constant jumps `h_0, h_1` and exponential sojourns `λ_0, λ_1`.
//!
//! Started in state `i`, the law of `X_i(t)` is an atom of mass `e^{-λ_i t}`
//! at `c_i t` plus an absolutely continuous part. The latter is the sum over
//! `n >= 1` switches of `q_i(x - j_in, t; n) θ(x - j_in, t)`, where `j_in` is
//! the accumulated jump after `n` switches. When `h_0 + h_1 = 0` the shifts
//! take only the values `h_i` (odd `n`) and `0` (even `n`) and the series sums
//! to two Bessel terms.

use serde::Serialize;

use crate::distributions::FamilySpec;
use crate::error::{positive, Error, Result};
use crate::model::{JumpRegime, ProcessSpec, State, VelocityRegime};
use crate::quadrature;

/// Switch-count series are cut where `(λ_max t)^n / n!` drops below this.
pub const SERIES_CUTOFF: f64 = 1e-12;
/// Below this argument `I_ν` is summed from its power series.
pub const BESSEL_SERIES_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ConstantCaseParams {
    pub c0: f64,
    pub c1: f64,
    pub h0: f64,
    pub h1: f64,
    pub lambda0: f64,
    pub lambda1: f64,
}

impl ConstantCaseParams {
    pub fn new(c: [f64; 2], h: [f64; 2], lambda: [f64; 2]) -> Result<Self> {
        let p = Self {
            c0: c[0],
            c1: c[1],
            h0: h[0],
            h1: h[1],
            lambda0: lambda[0],
            lambda1: lambda[1],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        crate::error::finite("c0", self.c0)?;
        crate::error::finite("c1", self.c1)?;
        crate::error::finite("h0", self.h0)?;
        crate::error::finite("h1", self.h1)?;
        positive("lambda0", self.lambda0)?;
        positive("lambda1", self.lambda1)?;
        if !(self.c0 > self.c1) {
            return Err(Error::InvalidParameter {
                name: "c0",
                value: self.c0,
                constraint: format!("requires c0 > c1 = {}", self.c1),
            });
        }
        Ok(())
    }

    pub fn velocity(&self, s: State) -> f64 {
        [self.c0, self.c1][s.index()]
    }

    pub fn jump(&self, s: State) -> f64 {
        [self.h0, self.h1][s.index()]
    }

    pub fn rate(&self, s: State) -> f64 {
        [self.lambda0, self.lambda1][s.index()]
    }

    /// `j_in`: sum of the first `n` alternating jumps starting with `h_i`.
    pub fn shift(&self, i: State, n: usize) -> f64 {
        let pairs = (n / 2) as f64 * (self.h0 + self.h1);
        if n % 2 == 1 {
            pairs + self.jump(i)
        } else {
            pairs
        }
    }

    /// Whether the jumps cancel pairwise, so the continuous part has the
    /// two-term Bessel form.
    pub fn jumps_cancel(&self) -> bool {
        (self.h0 + self.h1).abs() <= 1e-14 * (self.h0.abs() + self.h1.abs())
    }

    /// Series length for time `t`.
    pub fn n_max(&self, t: f64) -> usize {
        series_length(self.lambda0.max(self.lambda1) * t)
    }

    /// Interval carrying `X_i(t)`: the light cone widened by every shift
    /// reachable within the series length.
    pub fn support(&self, i: State, t: f64) -> (f64, f64) {
        let (mut lo, mut hi) = (self.c1 * t, self.c0 * t);
        let a = self.velocity(i) * t;
        lo = lo.min(a);
        hi = hi.max(a);
        let (mut min_shift, mut max_shift) = (f64::INFINITY, f64::NEG_INFINITY);
        for n in 1..=self.n_max(t) {
            let s = self.shift(i, n);
            min_shift = min_shift.min(s);
            max_shift = max_shift.max(s);
        }
        (lo.min(self.c1 * t + min_shift), hi.max(self.c0 * t + max_shift))
    }

    /// Breakpoints of the continuous density: edges of every shifted cone.
    pub fn breakpoints(&self, i: State, t: f64) -> Vec<f64> {
        let mut shifts: Vec<f64> = (1..=self.n_max(t)).map(|n| self.shift(i, n)).collect();
        shifts.sort_by(f64::total_cmp);
        shifts.dedup();
        let mut points: Vec<f64> = shifts
            .iter()
            .flat_map(|s| [self.c1 * t + s, self.c0 * t + s])
            .collect();
        points.sort_by(f64::total_cmp);
        points.dedup();
        points
    }

    /// The corresponding process with exponential sojourns.
    pub fn to_spec(&self, initial: State) -> Result<ProcessSpec> {
        Ok(ProcessSpec::new(
            [
                VelocityRegime::constant(self.c0),
                VelocityRegime::constant(self.c1),
            ],
            [JumpRegime::constant(self.h0), JumpRegime::constant(self.h1)],
            [
                FamilySpec::Exponential { lambda: self.lambda0 }.build_arc()?,
                FamilySpec::Exponential { lambda: self.lambda1 }.build_arc()?,
            ],
            initial,
        ))
    }
}

/// Smallest `n >= 1` with `m^n / n! < SERIES_CUTOFF`.
pub fn series_length(m: f64) -> usize {
    let mut term = 1.0;
    let mut n = 0usize;
    loop {
        n += 1;
        term *= m / n as f64;
        if term < SERIES_CUTOFF && n as f64 > m {
            return n;
        }
    }
}

/// Light-cone coordinates of `(x, t)`: `ξ` is the time spent in state 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicFrame {
    pub xi: f64,
    pub t_minus_xi: f64,
    pub theta: f64,
}

impl KinematicFrame {
    pub fn new(params: &ConstantCaseParams, x: f64, t: f64) -> Self {
        let w = params.c0 - params.c1;
        let xi = (x - params.c1 * t) / w;
        let t_minus_xi = t - xi;
        let theta = if xi > 0.0 && xi < t {
            (-params.lambda0 * xi - params.lambda1 * t_minus_xi).exp() / w
        } else {
            0.0
        };
        Self {
            xi,
            t_minus_xi,
            theta,
        }
    }

    pub fn inside(&self) -> bool {
        self.theta > 0.0 || (self.xi > 0.0 && self.t_minus_xi > 0.0)
    }

    /// `ln θ` inside the cone.
    fn log_theta(&self, params: &ConstantCaseParams) -> f64 {
        -params.lambda0 * self.xi
            - params.lambda1 * self.t_minus_xi
            - (params.c0 - params.c1).ln()
    }
}

fn check_bessel_arg(z: f64) -> Result<()> {
    if z >= 0.0 && z.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "bessel_i",
            value: z,
            constraint: "requires finite z >= 0".into(),
        })
    }
}

/// Power series of `I_ν(z)` for `ν ∈ {0, 1}`.
fn bessel_series(order: u32, z: f64) -> f64 {
    let q = 0.25 * z * z;
    let mut term = if order == 0 { 1.0 } else { 0.5 * z };
    let mut sum = term;
    let nu = order as f64;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * (k + nu));
        sum += term;
        if term <= 1e-17 * sum {
            return sum;
        }
    }
}

/// `e^{-z} I_ν(z)` from the large-argument expansion.
fn bessel_asymptotic_scaled(order: u32, z: f64) -> f64 {
    let mu = 4.0 * (order as f64).powi(2);
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0.0f64;
    loop {
        k += 1.0;
        let next = -term * (mu - (2.0 * k - 1.0).powi(2)) / (k * 8.0 * z);
        if next.abs() >= term.abs() || next.abs() < 1e-17 {
            sum += next;
            break;
        }
        sum += next;
        term = next;
    }
    sum / (2.0 * std::f64::consts::PI * z).sqrt()
}

/// Modified Bessel function `I_ν(z)` of order 0 or 1, `z >= 0`.
pub fn bessel_i(order: u32, z: f64) -> Result<f64> {
    check_order(order)?;
    check_bessel_arg(z)?;
    if z <= BESSEL_SERIES_LIMIT {
        Ok(bessel_series(order, z))
    } else {
        Ok(bessel_asymptotic_scaled(order, z) * z.exp())
    }
}

/// Exponentially scaled `e^{-z} I_ν(z)`.
pub fn bessel_i_scaled(order: u32, z: f64) -> Result<f64> {
    check_order(order)?;
    check_bessel_arg(z)?;
    if z <= BESSEL_SERIES_LIMIT {
        Ok(bessel_series(order, z) * (-z).exp())
    } else {
        Ok(bessel_asymptotic_scaled(order, z))
    }
}

fn check_order(order: u32) -> Result<()> {
    if order <= 1 {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "bessel_i is implemented for orders 0 and 1, got {order}"
        )))
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// `ln q_i(y, t; n)` in cone coordinates; the frame must lie inside the cone.
fn log_q(params: &ConstantCaseParams, i: State, frame: &KinematicFrame, n: usize) -> f64 {
    let (l0, l1) = (params.lambda0.ln(), params.lambda1.ln());
    let (a, b) = (frame.xi.ln(), frame.t_minus_xi.ln());
    let m = n / 2;
    if n % 2 == 0 {
        // m + 1 visits to state i, m to the other, m switches out of each.
        let (own, other) = (m as f64, (m - 1) as f64);
        let (p_own, p_other) = match i {
            State::Zero => (a, b),
            State::One => (b, a),
        };
        m as f64 * (l0 + l1) + own * p_own + other * p_other
            - ln_factorial(m - 1)
            - ln_factorial(m)
    } else {
        let rate = match i {
            State::Zero => (m + 1) as f64 * l0 + m as f64 * l1,
            State::One => m as f64 * l0 + (m + 1) as f64 * l1,
        };
        rate + m as f64 * (a + b) - 2.0 * ln_factorial(m)
    }
}

/// Density contribution of paths with exactly `n >= 1` switches by `t`.
pub fn density_n(params: &ConstantCaseParams, i: State, x: f64, t: f64, n: usize) -> Result<f64> {
    check_time(t)?;
    if n == 0 {
        return Err(Error::Domain {
            what: "density_n",
            value: 0.0,
            constraint: "n = 0 is the atom; use atom_mass and atom_location".into(),
        });
    }
    let frame = KinematicFrame::new(params, x - params.shift(i, n), t);
    if !(frame.xi > 0.0 && frame.t_minus_xi > 0.0) {
        return Ok(0.0);
    }
    Ok((log_q(params, i, &frame, n) + frame.log_theta(params)).exp())
}

/// `Σ_{n=1}^{n_max}` of [`density_n`].
pub fn series_form(params: &ConstantCaseParams, i: State, x: f64, t: f64, n_max: usize) -> Result<f64> {
    let mut sum = 0.0;
    for n in 1..=n_max {
        sum += density_n(params, i, x, t, n)?;
    }
    Ok(sum)
}

/// The two-term Bessel expression of the continuous density. Odd switch
/// counts are shifted by `h_i` and even counts are unshifted, which is exact
/// only when `h_0 + h_1 = 0`.
pub fn bessel_form(params: &ConstantCaseParams, i: State, x: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    let root = (params.lambda0 * params.lambda1).sqrt();
    let mut value = 0.0;

    let y = x - params.jump(i);
    let odd = KinematicFrame::new(params, y, t);
    if odd.xi > 0.0 && odd.t_minus_xi > 0.0 {
        let z = 2.0 * root * (odd.xi * odd.t_minus_xi).sqrt();
        value += params.rate(i) * (odd.log_theta(params) + z).exp() * bessel_i_scaled(0, z)?;
    }

    let even = KinematicFrame::new(params, x, t);
    if even.xi > 0.0 && even.t_minus_xi > 0.0 {
        let z = 2.0 * root * (even.xi * even.t_minus_xi).sqrt();
        let ratio = (x - params.c1 * t) / (params.c0 * t - x);
        let power = match i {
            State::Zero => ratio.sqrt(),
            State::One => 1.0 / ratio.sqrt(),
        };
        value += root * power * (even.log_theta(params) + z).exp() * bessel_i_scaled(1, z)?;
    }
    Ok(value)
}

/// Continuous density of `X_i(t)` at `x`: the Bessel form when the jumps
/// cancel, the truncated switch-count series otherwise.
pub fn density_at(params: &ConstantCaseParams, i: State, x: f64, t: f64) -> Result<f64> {
    if params.jumps_cancel() {
        bessel_form(params, i, x, t)
    } else {
        series_form(params, i, x, t, params.n_max(t))
    }
}

/// Atom and continuous density of `X(t)` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityResult {
    pub atom_location: f64,
    pub atom_mass: f64,
    pub x_grid: Vec<f64>,
    pub density_values: Vec<f64>,
    /// False when the bins centred at the grid points miss part of the
    /// support.
    pub support_covered: bool,
}

impl DensityResult {
    /// Atom plus trapezoid integral of the grid values.
    pub fn trapezoid_mass(&self) -> f64 {
        let integral: f64 = self
            .x_grid
            .windows(2)
            .zip(self.density_values.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum();
        self.atom_mass + integral
    }
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "transition density",
            value: t,
            constraint: "requires finite t > 0".into(),
        })
    }
}

pub fn atom_location(params: &ConstantCaseParams, i: State, t: f64) -> f64 {
    params.velocity(i) * t
}

pub fn atom_mass(params: &ConstantCaseParams, i: State, t: f64) -> f64 {
    (-params.rate(i) * t).exp()
}

/// Law of `X_i(t)` evaluated on `x_grid`.
pub fn density_total(params: &ConstantCaseParams, i: State, t: f64, x_grid: &[f64]) -> Result<DensityResult> {
    params.validate()?;
    check_time(t)?;
    crate::simulate::check_grid(x_grid)?;
    let density_values = x_grid
        .iter()
        .map(|&x| density_at(params, i, x, t))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = params.support(i, t);
    let edges = crate::simulate::centred_edges(x_grid);
    let slack = 1e-9 * (hi - lo);
    Ok(DensityResult {
        atom_location: atom_location(params, i, t),
        atom_mass: atom_mass(params, i, t),
        x_grid: x_grid.to_vec(),
        density_values,
        support_covered: edges[0] <= lo + slack && edges[edges.len() - 1] >= hi - slack,
    })
}

/// Mass of the continuous part, by adaptive quadrature between breakpoints.
pub fn continuous_mass(params: &ConstantCaseParams, i: State, t: f64) -> Result<f64> {
    check_time(t)?;
    let points = params.breakpoints(i, t);
    Ok(bin_masses(params, i, t, &points)?.iter().sum())
}

/// Continuous mass on each interval `[edges[k], edges[k + 1]]`, by adaptive
/// quadrature split at the density breakpoints.
pub fn bin_masses(params: &ConstantCaseParams, i: State, t: f64, edges: &[f64]) -> Result<Vec<f64>> {
    check_time(t)?;
    crate::simulate::check_grid(edges)?;
    let breaks = params.breakpoints(i, t);
    let mut out = Vec::with_capacity(edges.len() - 1);
    for w in edges.windows(2) {
        let mut cuts = vec![w[0]];
        cuts.extend(breaks.iter().copied().filter(|&b| b > w[0] && b < w[1]));
        cuts.push(w[1]);
        let mut mass = 0.0;
        for c in cuts.windows(2) {
            let mut failure = None;
            mass += quadrature::adaptive(
                |x| match density_at(params, i, x, t) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                },
                c[0],
                c[1],
                1e-13,
                quadrature::MAX_SUBDIVISIONS,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
        }
        out.push(mass);
    }
    Ok(out)
}

/// Mass of the `n`-switch term, integrated over its shifted cone.
pub fn term_mass(params: &ConstantCaseParams, i: State, t: f64, n: usize) -> Result<f64> {
    check_time(t)?;
    let s = params.shift(i, n);
    let mut failure = None;
    let mass = quadrature::adaptive(
        |x| match density_n(params, i, x, t, n) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        params.c1 * t + s,
        params.c0 * t + s,
        1e-14,
        quadrature::MAX_SUBDIVISIONS,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(mass),
    }
}

/// Uniform grid of `points` nodes covering the support of `X_i(t)` with a
/// relative margin on both sides.
pub fn covering_grid(params: &ConstantCaseParams, i: State, t: f64, points: usize, margin: f64) -> Vec<f64> {
    let (lo, hi) = params.support(i, t);
    let pad = margin * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    let n = points.max(2);
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

/// Centres of `bins` equal bins tiling the support of `X_i(t)` exactly.
pub fn bin_centres(params: &ConstantCaseParams, i: State, t: f64, bins: usize) -> Vec<f64> {
    let (lo, hi) = params.support(i, t);
    let n = bins.max(2);
    let w = (hi - lo) / n as f64;
    (0..n).map(|k| lo + (k as f64 + 0.5) * w).collect()
}
