//! Velocity and jump expressions.
//!
//! JSON forms:
//! - `1.5` or `{"const": 1.5}`
//! - `{"poly": [a0, a1, ...]}`: `a0 + a1 t + ...` in elapsed time
//! - `{"exp": {"scale": a, "rate_prev": b, "rate_elapsed": c}}`:
//!   `a exp(-b T - c t)`, `T` the previous sojourn
//! - `{"product": [e1, e2, ...]}`

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expr {
    Number(f64),
    Tagged(Tagged),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Tagged {
    Const(f64),
    Poly(Vec<f64>),
    Exp(ExpTerm),
    Product(Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpTerm {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub rate_prev: f64,
    #[serde(default)]
    pub rate_elapsed: f64,
}

fn one() -> f64 {
    1.0
}

impl Expr {
    pub fn eval(&self, prev: f64, t: f64) -> f64 {
        match self {
            Expr::Number(c) | Expr::Tagged(Tagged::Const(c)) => *c,
            Expr::Tagged(Tagged::Poly(a)) => a.iter().rev().fold(0.0, |acc, c| acc * t + c),
            Expr::Tagged(Tagged::Exp(e)) => e.scale * (-e.rate_prev * prev - e.rate_elapsed * t).exp(),
            Expr::Tagged(Tagged::Product(fs)) => fs.iter().map(|f| f.eval(prev, t)).product(),
        }
    }

    /// True when the value does not depend on the previous sojourn.
    pub fn is_memoryless(&self) -> bool {
        match self {
            Expr::Tagged(Tagged::Exp(e)) => e.rate_prev == 0.0,
            Expr::Tagged(Tagged::Product(fs)) => fs.iter().all(Expr::is_memoryless),
            _ => true,
        }
    }

    fn depends_on_elapsed(&self) -> bool {
        match self {
            Expr::Number(_) | Expr::Tagged(Tagged::Const(_)) => false,
            Expr::Tagged(Tagged::Poly(a)) => a.iter().skip(1).any(|c| *c != 0.0),
            Expr::Tagged(Tagged::Exp(e)) => e.rate_elapsed != 0.0,
            Expr::Tagged(Tagged::Product(fs)) => fs.iter().any(Expr::depends_on_elapsed),
        }
    }

    /// Closed-form `∫_u^t e(T, s) ds` when one exists in this grammar: any
    /// product with at most one factor depending on elapsed time.
    pub fn integral(&self, prev: f64, u: f64, t: f64) -> Option<f64> {
        match self {
            Expr::Number(c) | Expr::Tagged(Tagged::Const(c)) => Some(c * (t - u)),
            Expr::Tagged(Tagged::Poly(a)) => Some(
                a.iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let p = (k + 1) as i32;
                        c * (t.powi(p) - u.powi(p)) / p as f64
                    })
                    .sum(),
            ),
            Expr::Tagged(Tagged::Exp(e)) => {
                let front = e.scale * (-e.rate_prev * prev).exp();
                if e.rate_elapsed == 0.0 {
                    Some(front * (t - u))
                } else {
                    let c = e.rate_elapsed;
                    Some(front * (-c * u).exp() * -(-c * (t - u)).exp_m1() / c)
                }
            }
            Expr::Tagged(Tagged::Product(fs)) => {
                let moving: Vec<&Expr> = fs.iter().filter(|f| f.depends_on_elapsed()).collect();
                if moving.len() > 1 {
                    return None;
                }
                let fixed: f64 = fs
                    .iter()
                    .filter(|f| !f.depends_on_elapsed())
                    .map(|f| f.eval(prev, 0.0))
                    .product();
                match moving.first() {
                    None => Some(fixed * (t - u)),
                    Some(m) => m.integral(prev, u, t).map(|v| fixed * v),
                }
            }
        }
    }

    pub fn has_closed_form(&self) -> bool {
        self.integral(0.0, 0.0, 1.0).is_some()
    }

    /// First non-finite coefficient, for config diagnostics.
    pub fn check_finite(&self) -> Result<(), String> {
        let bad = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{what} coefficient {v} is not finite"))
            }
        };
        match self {
            Expr::Number(c) | Expr::Tagged(Tagged::Const(c)) => bad(*c, "constant"),
            Expr::Tagged(Tagged::Poly(a)) => {
                if a.is_empty() {
                    return Err("poly needs at least one coefficient".into());
                }
                a.iter().try_for_each(|c| bad(*c, "poly"))
            }
            Expr::Tagged(Tagged::Exp(e)) => {
                bad(e.scale, "exp scale")?;
                bad(e.rate_prev, "exp rate_prev")?;
                bad(e.rate_elapsed, "exp rate_elapsed")
            }
            Expr::Tagged(Tagged::Product(fs)) => {
                if fs.is_empty() {
                    return Err("product needs at least one factor".into());
                }
                fs.iter().try_for_each(Expr::check_finite)
            }
        }
    }
}
