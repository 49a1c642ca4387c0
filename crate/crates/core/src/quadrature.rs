//! Quadrature primitives: Gauss–Legendre panels, adaptive Gauss–Kronrod and
//! expectation rules over sojourn distributions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::SojournDistribution;

/// Absolute tolerance for displacement integrals.
pub const DISPLACEMENT_TOL: f64 = 1e-10;
/// Subdivision budget for adaptive integration.
pub const MAX_SUBDIVISIONS: usize = 1 << 20;
/// Tail mass discarded when truncating an infinite support.
pub const TAIL_MASS: f64 = 1e-16;
/// Node count of one expectation panel.
pub const PANEL_NODES: usize = 64;

/// Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Shared 64-node rule.
    pub fn panel() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(PANEL_NODES))
    }

    /// Shared 8-node rule used for short grid panels.
    pub fn short() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(8))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Integrates over [a, b], splitting at any breakpoints strictly inside.
    pub fn integrate_split<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        breakpoints: &[f64],
        mut f: F,
    ) -> f64 {
        let mut total = 0.0;
        let mut left = a;
        for &bp in breakpoints.iter().filter(|&&bp| bp > a && bp < b) {
            total += self.integrate(left, bp, &mut f);
            left = bp;
        }
        total + self.integrate(left, b, &mut f)
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p, d)
}

const KRONROD_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GAUSS7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64)> {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    if !fc.is_finite() {
        return Err(non_finite(a, b, mid));
    }
    let mut kronrod = fc * KRONROD_WEIGHTS[7];
    let mut gauss = fc * GAUSS7_WEIGHTS[3];
    for j in 0..7 {
        let dx = half * KRONROD_NODES[j];
        let f1 = f(mid - dx);
        let f2 = f(mid + dx);
        if !f1.is_finite() {
            return Err(non_finite(a, b, mid - dx));
        }
        if !f2.is_finite() {
            return Err(non_finite(a, b, mid + dx));
        }
        kronrod += KRONROD_WEIGHTS[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += GAUSS7_WEIGHTS[j / 2] * (f1 + f2);
        }
    }
    Ok((kronrod * half, ((kronrod - gauss) * half).abs()))
}

fn non_finite(lower: f64, upper: f64, at: f64) -> Error {
    Error::Quadrature {
        lower,
        upper,
        reason: format!("integrand not finite at {at}"),
    }
}

/// Adaptive Gauss–Kronrod (7/15) integration with global error control.
pub fn adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_subdivisions: usize,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (value, error) = kronrod15(&mut f, a, b)?;
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, error });
    let mut total = value;
    let mut total_error = error;
    let mut subdivisions = 0;
    while total_error > abs_tol {
        if subdivisions >= max_subdivisions {
            return Err(Error::Quadrature {
                lower: a,
                upper: b,
                reason: format!(
                    "no convergence after {max_subdivisions} subdivisions (error estimate {total_error:e})"
                ),
            });
        }
        let worst = heap.pop().expect("heap holds at least one segment");
        if worst.error == 0.0 {
            break;
        }
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Segment has collapsed to machine resolution; accept it.
            total_error -= worst.error;
            heap.push(Segment { error: 0.0, ..worst });
            continue;
        }
        let (lv, le) = kronrod15(&mut f, worst.a, mid)?;
        let (rv, re) = kronrod15(&mut f, mid, worst.b)?;
        total += lv + rv - worst.value;
        total_error += le + re - worst.error;
        heap.push(Segment { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Segment { a: mid, b: worst.b, value: rv, error: re });
        subdivisions += 1;
    }
    Ok(total)
}

/// Cumulative trapezoid integral of samples on a uniform grid, starting at 0.
pub fn cumulative_trapezoid(values: &[f64], step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (k, &v) in values.iter().enumerate() {
        if k > 0 {
            acc += 0.5 * step * (values[k - 1] + v);
        }
        out.push(acc);
    }
    out
}

/// Weighted nodes approximating expectations `E[φ(T)]` for a sojourn law.
///
/// Panels grow geometrically from the lower support edge up to the
/// `1 - TAIL_MASS` quantile; each panel carries a 64-node Gauss–Legendre rule
/// and is split until the density mass it integrates is stable. Weights are
/// renormalised to sum to one.
#[derive(Debug, Clone)]
pub struct ExpectationRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl ExpectationRule {
    /// A point mass at `at`.
    pub fn point(at: f64) -> Self {
        Self {
            nodes: vec![at],
            weights: vec![1.0],
        }
    }

    pub fn for_distribution(dist: &dyn SojournDistribution) -> Result<Self> {
        let (lower, upper) = dist.support();
        let upper = if upper.is_finite() {
            upper
        } else {
            dist.inverse_survival(TAIL_MASS)?
        };
        let median = dist.inverse_survival(0.5)?;
        let first = ((median - lower) / 8.0).max(1e-12 * (1.0 + lower.abs()));
        let mut cuts: Vec<f64> = vec![lower];
        let mut width = first;
        let mut edge = lower;
        while edge < upper {
            edge = (edge + width).min(upper);
            cuts.push(edge);
            width *= 2.0;
        }
        let breaks = dist.breakpoints();
        for &bp in breaks.iter().filter(|&&bp| bp > lower && bp < upper) {
            cuts.push(bp);
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let rule = GaussLegendre::panel();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut stack: Vec<(f64, f64, usize)> = cuts
            .windows(2)
            .rev()
            .map(|w| (w[0], w[1], 0usize))
            .collect();
        while let Some((a, b, depth)) = stack.pop() {
            let whole = rule.integrate(a, b, |t| dist.density(t));
            let mid = 0.5 * (a + b);
            let halves = rule.integrate(a, mid, |t| dist.density(t))
                + rule.integrate(mid, b, |t| dist.density(t));
            let settled = (whole - halves).abs() <= 1e-14 * whole.abs().max(1.0)
                || whole.abs() < 1e-16
                || depth >= 48;
            if settled || mid <= a || mid >= b {
                for (x, w) in rule.mapped(a, b) {
                    let wf = w * dist.density(x);
                    if wf != 0.0 {
                        nodes.push(x);
                        weights.push(wf);
                    }
                }
            } else {
                stack.push((mid, b, depth + 1));
                stack.push((a, mid, depth + 1));
            }
        }
        let mass: f64 = weights.iter().sum();
        if !(mass.is_finite() && mass > 0.5) {
            return Err(Error::Quadrature {
                lower,
                upper,
                reason: format!("density integrates to {mass}"),
            });
        }
        for w in &mut weights {
            *w /= mass;
        }
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }

    pub fn try_expect<F: FnMut(f64) -> Result<f64>>(&self, mut f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(t)?;
        }
        Ok(acc)
    }
}
