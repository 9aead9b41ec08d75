//! Experiment configuration (TOML).
//!
//! ```toml
//! mode = "sweep"
//! seed = 7
//!
//! [grid]
//! geometry = "interval"      # interval | square | normalized-disk
//! nodes = 64
//!
//! [params]
//! m = 2.0
//! q = 1.2
//! alpha = "auto"
//! t_final = "auto"
//! steps = 1000
//! k_schedule = [1e7, 1e8]
//!
//! [coefficients]
//! eps = { kind = "constant", value = 1e-6 }
//! lambda = { kind = "gaussian-bump", center = [0.5, 0.5], width = 0.1, amplitude = 0.3, base = 1.0 }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use pmelab::forward::ProblemParams;

use crate::phantom::Phantom;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Forward,
    Transform,
    Sweep,
    Recover,
    RecoverQ1,
    Partial,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Forward => "forward",
            Mode::Transform => "transform",
            Mode::Sweep => "sweep",
            Mode::Recover => "recover",
            Mode::RecoverQ1 => "recover-q1",
            Mode::Partial => "partial",
        };
        f.write_str(s)
    }
}

/// A number or the literal `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Auto {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for Auto {
    fn serialize<Se: Serializer>(&self, s: Se) -> Result<Se::Ok, Se::Error> {
        match self {
            Auto::Auto => s.serialize_str("auto"),
            Auto::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Auto {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Auto::Value(v)),
            Raw::Int(v) => Ok(Auto::Value(v as f64)),
            Raw::Text(s) if s == "auto" => Ok(Auto::Auto),
            Raw::Text(s) => Err(de::Error::custom(format!("expected a number or \"auto\", got \"{s}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    Interval,
    Square,
    NormalizedDisk,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub geometry: GeometryKind,
    /// Nodes per axis.
    pub nodes: usize,
    /// `[a, b]` for the interval and the square `[a, b]^2`.
    #[serde(default = "unit_extent")]
    pub extent: [f64; 2],
    /// Nodes with `x1 <= gamma_x1_max` form Gamma (interval/square only).
    #[serde(default)]
    pub gamma_x1_max: Option<f64>,
}

fn unit_extent() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub alpha: Auto,
    #[serde(default)]
    pub t_final: Auto,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_ks")]
    pub k_schedule: Vec<f64>,
    #[serde(default = "default_hs")]
    pub h_sweep: Vec<f64>,
}

fn default_m() -> f64 {
    2.0
}
fn default_q() -> f64 {
    1.2
}
fn default_steps() -> usize {
    200
}
fn default_ks() -> Vec<f64> {
    vec![1e2, 1e3, 1e4]
}
fn default_hs() -> Vec<f64> {
    (0..8).map(|i| 2f64.powi(4 + 2 * i)).collect()
}

impl Default for ParamSpec {
    fn default() -> Self {
        Self { m: 2.0, q: 1.2, alpha: Auto::Auto, t_final: Auto::Auto, steps: default_steps(), k_schedule: default_ks(), h_sweep: default_hs() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    #[serde(default = "Phantom::one")]
    pub eps: Phantom,
    #[serde(default = "Phantom::one")]
    pub gamma: Phantom,
    #[serde(default = "Phantom::one")]
    pub lambda: Phantom,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        Self { eps: Phantom::one(), gamma: Phantom::one(), lambda: Phantom::one() }
    }
}

/// Forward data: `phi(t, x) = amplitude t g(x)` and a time-independent
/// source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "Phantom::one")]
    pub g: Phantom,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "Phantom::zero")]
    pub source: Phantom,
}

fn one() -> f64 {
    1.0
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { g: Phantom::one(), amplitude: 1.0, source: Phantom::zero() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_newton")]
    pub newton_tol: f64,
    #[serde(default = "default_linear")]
    pub linear_tol: f64,
}

fn default_newton() -> f64 {
    1e-9
}
fn default_linear() -> f64 {
    1e-10
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { newton_tol: default_newton(), linear_tol: default_linear() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverySpec {
    #[serde(default = "default_basis")]
    pub basis: usize,
    #[serde(default = "default_coarse")]
    pub coarse: usize,
    /// Observation times of the `q = 1` separation.
    #[serde(default = "default_t_pair")]
    pub t_pair: [f64; 2],
    #[serde(default = "default_rel_tol")]
    pub max_rel_error: f64,
}

fn default_basis() -> usize {
    13
}
fn default_coarse() -> usize {
    8
}
fn default_t_pair() -> [f64; 2] {
    [0.5, 0.25]
}
fn default_rel_tol() -> f64 {
    0.15
}

impl Default for RecoverySpec {
    fn default() -> Self {
        Self { basis: 13, coarse: 8, t_pair: default_t_pair(), max_rel_error: default_rel_tol() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialSpec {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_eps_r")]
    pub eps_r: f64,
    #[serde(default = "default_cgo_hs")]
    pub cgo_h: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trial_traces: usize,
    #[serde(default = "default_random_z")]
    pub random_z: usize,
    #[serde(default = "default_min_slab")]
    pub min_slab: f64,
    /// `eps_i - eps_ii` cases with the verdict each should produce.
    #[serde(default = "default_cases")]
    pub cases: Vec<PartialCase>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialCase {
    pub name: String,
    pub delta_eps: Phantom,
    /// `"vanishing"` or `"non-vanishing"`.
    pub expect: String,
}

fn default_c() -> f64 {
    0.1
}
fn default_a() -> f64 {
    8.0
}
fn default_eps_r() -> f64 {
    0.05
}
fn default_cgo_hs() -> Vec<f64> {
    (0..6).map(|j| 0.2 * 0.7f64.powi(j)).collect()
}
fn default_trials() -> usize {
    12
}
fn default_random_z() -> usize {
    100
}
fn default_min_slab() -> f64 {
    0.1
}
fn default_cases() -> Vec<PartialCase> {
    vec![
        PartialCase { name: "deep".into(), delta_eps: Phantom::compact([-0.6, 0.0], 0.15, 1.0), expect: "vanishing".into() },
        PartialCase { name: "straddle".into(), delta_eps: Phantom::compact([-0.05, 0.0], 0.2, 1.0), expect: "non-vanishing".into() },
    ]
}

impl Default for PartialSpec {
    fn default() -> Self {
        Self {
            c: default_c(),
            a: default_a(),
            eps_r: default_eps_r(),
            cgo_h: default_cgo_hs(),
            trial_traces: default_trials(),
            random_z: default_random_z(),
            min_slab: default_min_slab(),
            cases: default_cases(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub grid: GridSpec,
    #[serde(default)]
    pub params: ParamSpec,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub recovery: RecoverySpec,
    #[serde(default)]
    pub partial: PartialSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Canonical TOML, the input of the config hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn problem(&self) -> Result<ProblemParams<f64>, ConfigError> {
        ProblemParams::new(self.params.m, self.params.q).map_err(|e| ConfigError::Invalid { field: "params.q", message: e.to_string() })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &'static str, message: String| Err(ConfigError::Invalid { field, message });
        self.problem()?;
        if self.grid.nodes < 5 {
            return invalid("grid.nodes", format!("need at least 5 nodes, got {}", self.grid.nodes));
        }
        if !(self.grid.extent[1] > self.grid.extent[0]) {
            return invalid("grid.extent", format!("empty extent {:?}", self.grid.extent));
        }
        if self.params.steps == 0 {
            return invalid("params.steps", "need at least one time step".into());
        }
        if let Auto::Value(a) = self.params.alpha {
            if !(a > 1.0 / (self.params.m - 1.0)) {
                return invalid("params.alpha", format!("alpha = {a} must exceed 1/(m-1)"));
            }
        }
        if let Auto::Value(t) = self.params.t_final {
            if !(t > 0.0) {
                return invalid("params.t_final", format!("T = {t} must be positive"));
            }
        }
        let ks = &self.params.k_schedule;
        if ks.is_empty() || ks.iter().any(|&k| !(k > 0.0)) || ks.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("params.k_schedule", "must be nonempty, positive and strictly increasing".into());
        }
        if self.params.h_sweep.iter().any(|&h| !(h > 1.0)) {
            return invalid("params.h_sweep", "every h must exceed 1".into());
        }
        for (field, p) in [("coefficients.eps", &self.coefficients.eps), ("coefficients.gamma", &self.coefficients.gamma)] {
            p.validate().map_err(|message| ConfigError::Invalid { field, message })?;
            if !(p.lower_bound() > 0.0) {
                return invalid(field, format!("coefficient must be positive (lower bound {})", p.lower_bound()));
            }
        }
        self.coefficients.lambda.validate().map_err(|message| ConfigError::Invalid { field: "coefficients.lambda", message })?;
        if self.coefficients.lambda.lower_bound() < 0.0 {
            return invalid("coefficients.lambda", "lambda must be nonnegative".into());
        }
        for (field, p) in [("data.g", &self.data.g), ("data.source", &self.data.source)] {
            p.validate().map_err(|message| ConfigError::Invalid { field, message })?;
            if p.lower_bound() < 0.0 {
                return invalid(field, "must be nonnegative".into());
            }
        }
        match self.mode {
            Some(Mode::Sweep) => {
                if self.grid.geometry == GeometryKind::NormalizedDisk {
                    return invalid("grid.geometry", "sweep runs on interval or square grids".into());
                }
                if self.params.h_sweep.len() < 6 {
                    return invalid("params.h_sweep", "the two-exponent fit needs at least 6 values".into());
                }
            }
            Some(Mode::Recover) | Some(Mode::RecoverQ1) => {
                if self.grid.geometry != GeometryKind::Square {
                    return invalid("grid.geometry", "recovery runs on a square grid".into());
                }
                if self.mode == Some(Mode::RecoverQ1) && self.params.q != 1.0 {
                    return invalid("params.q", "recover-q1 needs q = 1".into());
                }
                let pairs = self.recovery.basis * self.recovery.basis;
                if self.recovery.coarse * self.recovery.coarse > pairs {
                    return invalid("recovery.coarse", format!("{} unknowns exceed {pairs} pairings", self.recovery.coarse.pow(2)));
                }
            }
            Some(Mode::Partial) => {
                if self.grid.geometry != GeometryKind::NormalizedDisk {
                    return invalid("grid.geometry", "partial runs on the normalized disk".into());
                }
                if self.partial.cgo_h.len() < 4 {
                    return invalid("partial.cgo_h", "the decay fit needs at least 4 values".into());
                }
                for case in &self.partial.cases {
                    case.delta_eps.validate().map_err(|message| ConfigError::Invalid { field: "partial.cases", message })?;
                    if case.expect != "vanishing" && case.expect != "non-vanishing" {
                        return invalid("partial.cases", format!("expect must be \"vanishing\" or \"non-vanishing\", got \"{}\"", case.expect));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}
