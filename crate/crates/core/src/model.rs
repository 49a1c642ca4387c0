//! Model vocabulary: states, velocity and jump regimes, sojourn laws,
//! process specifications and simulated trajectories.
//!
//! Velocities are functions `c(T, t)` of the previously completed sojourn `T`
//! and the time `t` elapsed since the last switch. Jumps are functions `h(T)`
//! of the sojourn that has just been completed.

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, DISPLACEMENT_TOL, MAX_SUBDIVISIONS};

/// Label of the modulating two-state chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum State {
    Zero,
    One,
}

impl State {
    pub const BOTH: [State; 2] = [State::Zero, State::One];

    pub fn flip(self) -> Self {
        match self {
            State::Zero => State::One,
            State::One => State::Zero,
        }
    }

    pub fn index(self) -> usize {
        match self {
            State::Zero => 0,
            State::One => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            State::Zero
        } else {
            State::One
        }
    }
}

impl From<State> for u8 {
    fn from(s: State) -> u8 {
        s.index() as u8
    }
}

impl TryFrom<u8> for State {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(State::Zero),
            1 => Ok(State::One),
            other => Err(format!("state must be 0 or 1, got {other}")),
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Draws a uniform variate on the open interval (0, 1).
pub fn open_unit(rng: &mut dyn RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Law of one sojourn (interarrival time).
///
/// Implementors must keep `survival = 1 - cdf`, `survival(0) = 1` and a
/// non-increasing survival function.
pub trait SojournDistribution: Send + Sync + fmt::Debug {
    fn density(&self, t: f64) -> f64;

    fn survival(&self, t: f64) -> f64;

    fn cdf(&self, t: f64) -> f64 {
        1.0 - self.survival(t)
    }

    fn log_survival(&self, t: f64) -> f64 {
        self.survival(t).ln()
    }

    /// `(lower, upper)` edges of the support; `upper` may be infinite.
    fn support(&self) -> (f64, f64) {
        (0.0, f64::INFINITY)
    }

    /// Points where the density is discontinuous.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Smallest `t` with `survival(t) <= v`, for `v` in (0, 1).
    ///
    /// The default inverts numerically (safeguarded Newton on a doubling
    /// bracket) to an absolute tolerance of 1e-10. Returns `+inf` when the
    /// survival function plateaus above `v` (defective law).
    fn inverse_survival(&self, v: f64) -> Result<f64> {
        invert_survival(self, v)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Result<f64> {
        self.inverse_survival(open_unit(rng))
    }

    /// `Some(rate)` when the law is exponential.
    fn exponential_rate(&self) -> Option<f64> {
        None
    }

    /// Order from which the moment solvers refuse this law, if any.
    fn moment_index(&self) -> Option<f64> {
        None
    }
}

pub(crate) fn invert_survival<D: SojournDistribution + ?Sized>(dist: &D, v: f64) -> Result<f64> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Domain {
            what: "inverse survival",
            value: v,
            constraint: "requires 0 < v < 1".into(),
        });
    }
    let (lower, upper) = dist.support();
    if dist.survival(lower) <= v {
        return Ok(lower);
    }
    let mut lo = lower;
    let mut hi = if upper.is_finite() {
        upper
    } else {
        let mut hi = lower + 1.0;
        while dist.survival(hi) > v {
            lo = hi;
            hi = lower + 2.0 * (hi - lower);
            if hi > 1e150 {
                return Ok(f64::INFINITY);
            }
        }
        hi
    };
    if upper.is_finite() && dist.survival(hi) > v {
        return Ok(f64::INFINITY);
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let s = dist.survival(t);
        if !s.is_finite() {
            return Err(Error::Sampling(format!("survival not finite at {t}")));
        }
        if s > v {
            lo = t;
        } else {
            hi = t;
        }
        let f = dist.density(t);
        let newton = if f > 0.0 { t + (s - v) / f } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - t).abs() <= 1e-12 * t.abs().max(1.0) || hi - lo <= 1e-10 * 1e-3 {
            return Ok(next);
        }
        t = next;
    }
    if hi - lo <= 1e-10 * hi.abs().max(1.0) {
        Ok(0.5 * (lo + hi))
    } else {
        Err(Error::Sampling(format!(
            "numerical inversion of the survival function did not converge for v = {v}"
        )))
    }
}

type VelocityFn = dyn Fn(f64, f64) -> f64 + Send + Sync;
type DisplacementFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;
type AmplitudeFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Velocity regime `c(T, t)`, optionally with a closed-form displacement
/// `l(T; u, t) = ∫_u^t c(T, s) ds`.
#[derive(Clone)]
pub struct VelocityRegime {
    velocity: Arc<VelocityFn>,
    displacement: Option<Arc<DisplacementFn>>,
    memoryless: bool,
    breakpoints: Vec<f64>,
}

impl fmt::Debug for VelocityRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VelocityRegime")
            .field("closed_form", &self.displacement.is_some())
            .field("memoryless", &self.memoryless)
            .finish()
    }
}

impl VelocityRegime {
    /// General regime depending on the previous sojourn and the elapsed time.
    pub fn new<F>(velocity: F) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            velocity: Arc::new(velocity),
            displacement: None,
            memoryless: false,
            breakpoints: Vec::new(),
        }
    }

    /// Regime that ignores the previous sojourn: `c(T, t) = v(t)`.
    pub fn memoryless<F>(velocity: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let mut regime = Self::new(move |_, t| velocity(t));
        regime.memoryless = true;
        regime
    }

    pub fn constant(v: f64) -> Self {
        Self::memoryless(move |_| v).with_displacement(move |_, u, t| v * (t - u))
    }

    pub fn with_displacement<G>(mut self, displacement: G) -> Self
    where
        G: Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    {
        self.displacement = Some(Arc::new(displacement));
        self
    }

    /// Elapsed times where the velocity is discontinuous.
    pub fn with_breakpoints(mut self, breakpoints: Vec<f64>) -> Self {
        self.breakpoints = breakpoints;
        self
    }

    pub fn velocity(&self, prev_sojourn: f64, elapsed: f64) -> f64 {
        (self.velocity)(prev_sojourn, elapsed)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn is_memoryless(&self) -> bool {
        self.memoryless
    }

    pub fn has_closed_form(&self) -> bool {
        self.displacement.is_some()
    }

    /// `l(T; u, t)`; see [`displacement`].
    pub fn displacement(&self, prev_sojourn: f64, from: f64, to: f64) -> Result<f64> {
        displacement(self, prev_sojourn, from, to)
    }
}

/// Displacement `l(T; u, t) = ∫_u^t c(T, s) ds` for `0 <= u <= t`.
///
/// Uses the closed form when the regime carries one, otherwise adaptive
/// Gauss–Kronrod quadrature to an absolute tolerance of 1e-10.
pub fn displacement(regime: &VelocityRegime, prev_sojourn: f64, from: f64, to: f64) -> Result<f64> {
    if !(from >= 0.0 && to >= from) || prev_sojourn < 0.0 {
        return Err(Error::Domain {
            what: "displacement",
            value: to,
            constraint: format!("requires 0 <= u <= t and T >= 0 (u = {from}, T = {prev_sojourn})"),
        });
    }
    if from == to {
        return Ok(0.0);
    }
    if let Some(l) = &regime.displacement {
        let v = l(prev_sojourn, from, to);
        if v.is_finite() {
            return Ok(v);
        }
        return Err(Error::NonFiniteVelocity {
            prev: prev_sojourn,
            at: to,
            value: v,
        });
    }
    let bad: Cell<Option<(f64, f64)>> = Cell::new(None);
    let integrand = |s: f64| {
        let v = regime.velocity(prev_sojourn, s);
        if !v.is_finite() && bad.get().is_none() {
            bad.set(Some((s, v)));
        }
        v
    };
    let mut total = 0.0;
    let mut left = from;
    let mut pieces: Vec<f64> = regime
        .breakpoints
        .iter()
        .copied()
        .filter(|&b| b > from && b < to)
        .collect();
    pieces.push(to);
    for right in pieces {
        match quadrature::adaptive(integrand, left, right, DISPLACEMENT_TOL, MAX_SUBDIVISIONS) {
            Ok(v) => total += v,
            Err(e) => {
                return Err(match bad.get() {
                    Some((at, value)) => Error::NonFiniteVelocity {
                        prev: prev_sojourn,
                        at,
                        value,
                    },
                    None => e,
                })
            }
        }
        left = right;
    }
    Ok(total)
}

/// Jump amplitude `h(T)` as a function of the sojourn just completed.
#[derive(Clone)]
pub struct JumpRegime {
    amplitude: Arc<AmplitudeFn>,
}

impl fmt::Debug for JumpRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("JumpRegime")
    }
}

impl JumpRegime {
    pub fn new<F>(amplitude: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            amplitude: Arc::new(amplitude),
        }
    }

    pub fn constant(h: f64) -> Self {
        Self::new(move |_| h)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn amplitude(&self, sojourn: f64) -> f64 {
        (self.amplitude)(sojourn)
    }
}

/// Full model: two velocity regimes, two jump regimes, two sojourn laws and
/// the initial state. Index 0 holds the regime of state 0.
#[derive(Debug, Clone)]
pub struct ProcessSpec {
    pub velocity: [VelocityRegime; 2],
    pub jump: [JumpRegime; 2],
    pub sojourn: [Arc<dyn SojournDistribution>; 2],
    pub initial_state: State,
}

impl ProcessSpec {
    pub fn new(
        velocity: [VelocityRegime; 2],
        jump: [JumpRegime; 2],
        sojourn: [Arc<dyn SojournDistribution>; 2],
        initial_state: State,
    ) -> Self {
        Self {
            velocity,
            jump,
            sojourn,
            initial_state,
        }
    }

    pub fn with_initial_state(&self, state: State) -> Self {
        Self {
            initial_state: state,
            ..self.clone()
        }
    }

    pub fn velocity(&self, s: State) -> &VelocityRegime {
        &self.velocity[s.index()]
    }

    pub fn jump(&self, s: State) -> &JumpRegime {
        &self.jump[s.index()]
    }

    pub fn sojourn(&self, s: State) -> &dyn SojournDistribution {
        self.sojourn[s.index()].as_ref()
    }

    /// Exponential rates of both sojourn laws, if both are exponential.
    pub fn exponential_rates(&self) -> Option<[f64; 2]> {
        Some([
            self.sojourn[0].exponential_rate()?,
            self.sojourn[1].exponential_rate()?,
        ])
    }
}

/// Switch skeleton of one simulated trajectory on `[0, horizon]`.
///
/// Entry `n` of `switch_times`, `sojourns`, `states` and `positions` refers to
/// switch `n` (with `n = 0` the start); `states[n]` is the state occupied on
/// `(τ_n, τ_{n+1}]` and `positions[n] = X(τ_n)` including the jump at `τ_n`.
/// `jumps[n - 1]` is the jump at `τ_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Path {
    switch_times: Vec<f64>,
    sojourns: Vec<f64>,
    states: Vec<State>,
    jumps: Vec<f64>,
    positions: Vec<f64>,
    horizon: f64,
}

impl Path {
    /// Empty path started in `initial` with pre-start sojourn `pre_sojourn`.
    pub fn start(initial: State, pre_sojourn: f64, horizon: f64) -> Self {
        Self {
            switch_times: vec![0.0],
            sojourns: vec![pre_sojourn],
            states: vec![initial],
            jumps: Vec::new(),
            positions: vec![0.0],
            horizon,
        }
    }

    /// Appends the switch that ends a sojourn of length `duration` in the
    /// current state. Returns `false` (and leaves the path unchanged) if the
    /// switch would fall after the horizon.
    pub fn push_switch(&mut self, spec: &ProcessSpec, duration: f64) -> Result<bool> {
        let last = *self.switch_times.last().expect("path has a start");
        let tau = last + duration;
        if tau > self.horizon {
            return Ok(false);
        }
        let sojourn = tau - last;
        let state = self.current_state();
        let prev = *self.sojourns.last().expect("path has a start");
        let moved = spec.velocity(state).displacement(prev, 0.0, sojourn)?;
        let jump = spec.jump(state).amplitude(sojourn);
        if !jump.is_finite() {
            return Err(Error::Domain {
                what: "jump amplitude",
                value: sojourn,
                constraint: format!("amplitude {jump} is not finite"),
            });
        }
        let position = self.positions.last().expect("path has a start") + moved + jump;
        self.switch_times.push(tau);
        self.sojourns.push(sojourn);
        self.states.push(state.flip());
        self.jumps.push(jump);
        self.positions.push(position);
        Ok(true)
    }

    fn current_state(&self) -> State {
        *self.states.last().expect("path has a start")
    }

    pub fn switch_times(&self) -> &[f64] {
        &self.switch_times
    }

    pub fn sojourns(&self) -> &[f64] {
        &self.sojourns
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    pub fn positions_at_switches(&self) -> &[f64] {
        &self.positions
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_state(&self) -> State {
        self.states[0]
    }

    /// Number of switches on the horizon.
    pub fn switch_count(&self) -> usize {
        self.switch_times.len() - 1
    }

    /// `N(t)`: number of switch times in `(0, t]`.
    pub fn count_at(&self, t: f64) -> usize {
        self.switch_times[1..].partition_point(|&tau| tau <= t)
    }

    /// State occupied at `t` (right-continuous, like `N`).
    pub fn state_at(&self, t: f64) -> State {
        self.states[self.count_at(t)]
    }

    /// `X(t)`; see [`position_at`].
    pub fn position_at(&self, spec: &ProcessSpec, t: f64) -> Result<f64> {
        position_at(self, spec, t)
    }
}

/// Position `X(t) = X(τ_N) + l(T_N; 0, t - τ_N)` with `N = N(t)`.
///
/// Right-continuous: at a switch time the jump is already included.
pub fn position_at(path: &Path, spec: &ProcessSpec, t: f64) -> Result<f64> {
    if !(t >= 0.0 && t <= path.horizon) {
        return Err(Error::Domain {
            what: "position_at",
            value: t,
            constraint: format!("requires 0 <= t <= horizon = {}", path.horizon),
        });
    }
    let n = path.count_at(t);
    let state = path.states[n];
    let elapsed = t - path.switch_times[n];
    let moved = spec
        .velocity(state)
        .displacement(path.sojourns[n], 0.0, elapsed)?;
    Ok(path.positions[n] + moved)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Unit;
    impl SojournDistribution for Unit {
        fn density(&self, t: f64) -> f64 {
            (-t).exp()
        }
        fn survival(&self, t: f64) -> f64 {
            (-t).exp()
        }
    }

    fn constant_spec(v: [f64; 2], h: [f64; 2]) -> ProcessSpec {
        ProcessSpec::new(
            [VelocityRegime::constant(v[0]), VelocityRegime::constant(v[1])],
            [JumpRegime::constant(h[0]), JumpRegime::constant(h[1])],
            [Arc::new(Unit), Arc::new(Unit)],
            State::Zero,
        )
    }

    #[test]
    fn flip_is_an_involution() {
        for s in State::BOTH {
            assert_eq!(s.flip().flip(), s);
        }
        assert_eq!(State::Zero.flip(), State::One);
        assert_eq!(State::One.flip(), State::Zero);
    }

    #[test]
    fn constant_displacement() {
        let r = VelocityRegime::constant(2.5);
        assert_eq!(r.displacement(7.0, 0.0, 1.0).unwrap(), 2.5);
        assert_eq!(r.displacement(7.0, 0.3, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn quadrature_displacement_matches_antiderivative() {
        let r = VelocityRegime::new(|_, s: f64| (-s).exp());
        let v = r.displacement(0.0, 0.0, 1.0).unwrap();
        assert!((v - (1.0 - (-1f64).exp())).abs() < 1e-10);
        assert!((v - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn quadrature_displacement_is_additive() {
        let r = VelocityRegime::new(|prev: f64, s: f64| (prev * s).sin() + s * s);
        let a = r.displacement(1.3, 0.2, 0.9).unwrap();
        let b = r.displacement(1.3, 0.9, 2.1).unwrap();
        let c = r.displacement(1.3, 0.2, 2.1).unwrap();
        assert!((a + b - c).abs() < 1e-10);
    }

    #[test]
    fn non_finite_velocity_names_the_point() {
        let r = VelocityRegime::new(|_, s: f64| if s > 0.5 { f64::NAN } else { 1.0 });
        match r.displacement(0.0, 0.0, 1.0) {
            Err(Error::NonFiniteVelocity { at, .. }) => assert!(at > 0.5 && at <= 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn displacement_rejects_reversed_interval() {
        let r = VelocityRegime::constant(1.0);
        assert!(matches!(r.displacement(0.0, 1.0, 0.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn single_segment_position() {
        let spec = constant_spec([1.5, -1.0], [0.0, 0.0]);
        let path = Path::start(State::Zero, 0.7, 2.0);
        assert!((path.position_at(&spec, 1.2).unwrap() - 1.8).abs() < 1e-15);
        assert!(path.position_at(&spec, 2.5).is_err());
        assert!(path.position_at(&spec, -0.1).is_err());
    }

    #[test]
    fn two_switch_hand_built_path() {
        // c = (1, -2), h = (0.5, -0.25); sojourns 0.4 then 0.6 on horizon 2.
        let spec = constant_spec([1.0, -2.0], [0.5, -0.25]);
        let mut path = Path::start(State::Zero, 0.3, 2.0);
        assert!(path.push_switch(&spec, 0.4).unwrap());
        assert!(path.push_switch(&spec, 0.6).unwrap());
        assert!(!path.push_switch(&spec, 5.0).unwrap());
        assert_eq!(path.switch_count(), 2);
        // X(0.4) = 0.4 + 0.5 = 0.9; X(1.0) = 0.9 - 1.2 - 0.25 = -0.55
        let p = path.positions_at_switches();
        assert!((p[1] - 0.9).abs() < 1e-12);
        assert!((p[2] + 0.55).abs() < 1e-12);
        // a jump exactly at tau_2 is included
        assert!((path.position_at(&spec, 1.0).unwrap() + 0.55).abs() < 1e-12);
        // X(1.5) = -0.55 + 0.5
        assert!((path.position_at(&spec, 1.5).unwrap() + 0.05).abs() < 1e-12);
        assert_eq!(path.count_at(0.4), 1);
        assert_eq!(path.count_at(0.39), 0);
        assert_eq!(path.state_at(0.5), State::One);
        assert_eq!(path.states(), &[State::Zero, State::One, State::Zero]);
    }

    #[test]
    fn numeric_inversion_recovers_exponential_quantile() {
        let t = Unit.inverse_survival(0.25).unwrap();
        assert!((t - 4f64.ln()).abs() < 1e-10);
        assert!(Unit.inverse_survival(0.0).is_err());
    }
}
