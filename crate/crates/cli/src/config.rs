//! Run configuration: a JSON document with a model and per-command sections.

use std::sync::Arc;

use jumptel::analytic::ConstantCaseParams;
use jumptel::distributions::FamilySpec;
use jumptel::martingale;
use jumptel::{JumpRegime, ProcessSpec, State, VelocityRegime};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::expr::Expr;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    pub simulate: Option<SimulateSection>,
    pub density: Option<DensitySection>,
    pub moments: Option<MomentsSection>,
    pub check: Option<CheckSection>,
    pub girsanov: Option<GirsanovSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Constant velocities and jumps with exponential sojourns.
    Constant {
        c: [f64; 2],
        h: [f64; 2],
        lambda: [f64; 2],
        #[serde(default)]
        initial_state: u8,
    },
    /// Expression velocities `c_i(T, t)` and jumps `h_i(s)` (`s` the
    /// completed sojourn; both variables of a jump expression bind to it).
    General {
        velocity: [Expr; 2],
        jump: [Expr; 2],
        sojourn: [FamilySpec; 2],
        #[serde(default)]
        initial_state: u8,
    },
    /// Velocity `H_i r_i(t)` and jump `H_i`, `r_i` the family ratio.
    Calibrated {
        sojourn: [FamilySpec; 2],
        amplitude: [f64; 2],
        #[serde(default)]
        initial_state: u8,
    },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_paths")]
    pub paths: usize,
    pub horizon: f64,
    /// Defaults to the horizon alone.
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub antithetic: bool,
    /// Number of path skeletons written to paths.csv.
    #[serde(default = "default_stored")]
    pub store_paths: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySection {
    pub t: f64,
    pub x_grid: GridSpec,
    #[serde(default = "default_density_paths")]
    pub paths: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum GridSpec {
    Points(Vec<f64>),
    Range { from: f64, to: f64, points: usize },
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<f64>, CliError> {
        match self {
            GridSpec::Points(v) => Ok(v.clone()),
            GridSpec::Range { from, to, points } => {
                if *points < 2 || !(to > from) {
                    return Err(CliError::Config(format!(
                        "x_grid range needs points >= 2 and to > from (got {from}..{to}, {points} points)"
                    )));
                }
                let n = *points - 1;
                Ok((0..=n).map(|k| from + (to - from) * k as f64 / n as f64).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsSection {
    #[serde(default = "default_order")]
    pub order: usize,
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub horizon: f64,
    #[serde(default = "default_check_dt")]
    pub dt: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GirsanovSection {
    pub target: [f64; 2],
    pub times: Vec<f64>,
    #[serde(default = "default_paths")]
    pub paths: usize,
}

fn default_paths() -> usize {
    10_000
}
fn default_density_paths() -> usize {
    100_000
}
fn default_stored() -> usize {
    10
}
fn default_order() -> usize {
    2
}
fn default_dt() -> f64 {
    1e-3
}
fn default_check_dt() -> f64 {
    1e-2
}

/// Parses a config, reporting the JSON path and line of the first problem.
pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!(
            "at `{path}` (line {}, column {}): {inner}",
            inner.line(),
            inner.column()
        ))
    })
}

fn state(v: u8) -> Result<State, CliError> {
    match v {
        0 => Ok(State::Zero),
        1 => Ok(State::One),
        _ => Err(CliError::Config(format!("model.initial_state must be 0 or 1, got {v}"))),
    }
}

fn config_err(field: &str) -> impl Fn(jumptel::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{field}: {e}"))
}

fn velocity_regime(e: &Expr) -> VelocityRegime {
    let f = e.clone();
    let regime = if e.is_memoryless() {
        VelocityRegime::memoryless(move |t| f.eval(0.0, t))
    } else {
        VelocityRegime::new(move |prev, t| f.eval(prev, t))
    };
    if e.has_closed_form() {
        let g = e.clone();
        regime.with_displacement(move |prev, u, t| g.integral(prev, u, t).unwrap_or(f64::NAN))
    } else {
        regime
    }
}

impl ModelConfig {
    pub fn initial_state(&self) -> Result<State, CliError> {
        match self {
            ModelConfig::Constant { initial_state, .. }
            | ModelConfig::General { initial_state, .. }
            | ModelConfig::Calibrated { initial_state, .. } => state(*initial_state),
        }
    }

    /// Parameters of the closed-form case, when the model is constant.
    pub fn constant_params(&self) -> Option<Result<ConstantCaseParams, CliError>> {
        match self {
            ModelConfig::Constant { c, h, lambda, .. } => {
                Some(ConstantCaseParams::new(*c, *h, *lambda).map_err(config_err("model")))
            }
            _ => None,
        }
    }

    pub fn build(&self) -> Result<ProcessSpec, CliError> {
        let initial = self.initial_state()?;
        match self {
            ModelConfig::Constant { c, h, lambda, .. } => {
                for (k, v) in c.iter().chain(h).enumerate() {
                    if !v.is_finite() {
                        return Err(CliError::Config(format!("model: coefficient {k} is not finite ({v})")));
                    }
                }
                let sojourn = [
                    FamilySpec::Exponential { lambda: lambda[0] }
                        .build_arc()
                        .map_err(config_err("model.lambda[0]"))?,
                    FamilySpec::Exponential { lambda: lambda[1] }
                        .build_arc()
                        .map_err(config_err("model.lambda[1]"))?,
                ];
                Ok(ProcessSpec::new(
                    [VelocityRegime::constant(c[0]), VelocityRegime::constant(c[1])],
                    [JumpRegime::constant(h[0]), JumpRegime::constant(h[1])],
                    sojourn,
                    initial,
                ))
            }
            ModelConfig::General {
                velocity,
                jump,
                sojourn,
                ..
            } => {
                for (k, e) in velocity.iter().enumerate() {
                    e.check_finite()
                        .map_err(|m| CliError::Config(format!("model.velocity[{k}]: {m}")))?;
                }
                for (k, e) in jump.iter().enumerate() {
                    e.check_finite()
                        .map_err(|m| CliError::Config(format!("model.jump[{k}]: {m}")))?;
                }
                let laws = [
                    sojourn[0].build_arc().map_err(config_err("model.sojourn[0]"))?,
                    sojourn[1].build_arc().map_err(config_err("model.sojourn[1]"))?,
                ];
                let jumps = [jump[0].clone(), jump[1].clone()].map(|e| {
                    let e = Arc::new(e);
                    JumpRegime::new(move |s| e.eval(s, s))
                });
                Ok(ProcessSpec::new(
                    [velocity_regime(&velocity[0]), velocity_regime(&velocity[1])],
                    jumps,
                    laws,
                    initial,
                ))
            }
            ModelConfig::Calibrated { sojourn, amplitude, .. } => {
                martingale::calibrated_spec(*sojourn, *amplitude, initial).map_err(config_err("model"))
            }
        }
    }
}
