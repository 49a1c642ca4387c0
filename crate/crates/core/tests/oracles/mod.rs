//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_traits::{One, ToPrimitive, Zero};

pub type Matrix = Vec<Vec<f64>>;

fn identity(n: usize) -> Matrix {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i][j] += aik * b[k][j];
            }
        }
    }
    c
}

fn norm_inf(a: &Matrix) -> f64 {
    a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring of a Taylor polynomial.
pub fn expm(a: &Matrix) -> Matrix {
    let n = a.len();
    let norm = norm_inf(a);
    let s = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let scale = 0.5f64.powi(s);
    let a: Matrix = a.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=30 {
        term = matmul(&term, &a);
        for row in term.iter_mut() {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
        if norm_inf(&term) < 1e-20 {
            break;
        }
    }
    for _ in 0..s {
        result = matmul(&result, &result);
    }
    result
}

pub fn apply(a: &Matrix, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

/// `I_ν(z)` from its power series in exact fixed-point arithmetic.
pub fn bessel_i(order: u32, z: f64) -> f64 {
    assert!(z >= 0.0 && z.is_finite());
    if z == 0.0 {
        return if order == 0 { 1.0 } else { 0.0 };
    }
    const PREC: u32 = 320;
    // z / 2 = m · 2^e exactly.
    let bits = z.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (m, e) = if exp == 0 { (frac, -1074i64) } else { (frac | (1 << 52), exp - 1075) };
    let (m, e) = (BigInt::from(m), e - 1);
    let nu = order as usize;
    let mut sum = BigInt::zero();
    let mut k_fact = BigInt::one();
    let mut knu_fact: BigInt = (1..=nu).fold(BigInt::one(), |acc, j| acc * j);
    for k in 0..400usize {
        if k > 0 {
            k_fact *= k;
            knu_fact *= k + nu;
        }
        let j = (2 * k + nu) as u32;
        let num = m.pow(j) << PREC;
        let shift = e * j as i64;
        let num = if shift >= 0 { num << shift as usize } else { num >> (-shift) as usize };
        let term = num / (&k_fact * &knu_fact);
        if term.is_zero() && k > 10 {
            break;
        }
        sum += term;
    }
    let top = sum.bits().saturating_sub(64);
    let mantissa = (sum >> top as usize).to_f64().unwrap();
    mantissa * 2f64.powi(top as i32 - PREC as i32)
}

/// `P(N(t) = n)` for `n = 0..=n_max` when the sojourns alternate between
/// exponential laws with rates `lambda[i]`, `lambda[1-i]`, ..., from the
/// counting chain on `(n, state)`.
pub fn renewal_counts(lambda: [f64; 2], i: usize, t: f64, n_max: usize) -> Vec<f64> {
    let size = 2 * (n_max + 2);
    let idx = |n: usize, s: usize| 2 * n + s;
    let mut q = vec![vec![0.0; size]; size];
    for n in 0..=n_max {
        for s in 0..2 {
            let r = lambda[s] * t;
            q[idx(n, s)][idx(n, s)] = -r;
            q[idx(n, s)][idx(n + 1, 1 - s)] = r;
        }
    }
    // Absorbing overflow level.
    let e = expm(&q);
    (0..=n_max).map(|n| e[idx(0, i)][idx(n, 0)] + e[idx(0, i)][idx(n, 1)]).collect()
}

/// Moments `μ_i^{(k)}(t)`, `k = 0..=order`, of the constant-case process
/// with exponential sojourns, through the backward equations
/// `μ_i^{(k)}' = k c_i μ_i^{(k-1)} + λ_i (Σ_j C(k, j) h_i^{k-j} μ_{1-i}^{(j)} - μ_i^{(k)})`
/// solved by the matrix exponential. Returns `[state][k]`.
pub fn constant_case_moments(c: [f64; 2], h: [f64; 2], lambda: [f64; 2], order: usize, t: f64) -> [Vec<f64>; 2] {
    let size = 2 * (order + 1);
    let idx = |k: usize, s: usize| 2 * k + s;
    let binom = |n: usize, k: usize| (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64);
    let mut m = vec![vec![0.0; size]; size];
    for k in 0..=order {
        for s in 0..2 {
            let row = idx(k, s);
            if k > 0 {
                m[row][idx(k - 1, s)] += k as f64 * c[s];
            }
            m[row][row] -= lambda[s];
            for j in 0..=k {
                m[row][idx(j, 1 - s)] += lambda[s] * binom(k, j) * h[s].powi((k - j) as i32);
            }
        }
    }
    let scaled: Matrix = m.iter().map(|r| r.iter().map(|v| v * t).collect()).collect();
    let mut y0 = vec![0.0; size];
    y0[0] = 1.0;
    y0[1] = 1.0;
    let y = apply(&expm(&scaled), &y0);
    [
        (0..=order).map(|k| y[idx(k, 0)]).collect(),
        (0..=order).map(|k| y[idx(k, 1)]).collect(),
    ]
}
