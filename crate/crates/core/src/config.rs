//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::control::DescentOptions;
use crate::geometry::{Point, DEFAULT_POINT_BUDGET};
use crate::model::{ModelError, ModelParams};
use crate::solver::{SolverError, SolverOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("missing mode")]
    MissingMode,
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("{key}: cannot parse `{value}` as {expected}")]
    Type { key: String, value: String, expected: &'static str },
    #[error("{key}: requires {constraint}")]
    Constraint { key: String, constraint: String },
}

impl ConfigError {
    fn constraint(key: &str, constraint: impl Into<String>) -> Self {
        ConfigError::Constraint { key: key.to_string(), constraint: constraint.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    VerifyKernel,
    VerifyCalculus,
    Solve,
    OracleCheck,
    Optimize,
    Sweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::VerifyKernel => "verify-kernel",
            Mode::VerifyCalculus => "verify-calculus",
            Mode::Solve => "solve",
            Mode::OracleCheck => "oracle-check",
            Mode::Optimize => "optimize",
            Mode::Sweep => "sweep",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Mode::VerifyKernel, Mode::VerifyCalculus, Mode::Solve, Mode::OracleCheck, Mode::Optimize, Mode::Sweep]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// Where a spatial field comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldSource {
    Constant(f64),
    Gaussian { amplitude: f64, center: Point, width: f64 },
    /// Grid CSV with an extra `value` column.
    File(PathBuf),
}

/// Every recognised key with its default, in documentation order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mode", "(required)", "verify-kernel | verify-calculus | solve | oracle-check | optimize | sweep"),
    ("dim", "1", "spatial dimension, 1 or 2"),
    ("lower", "0 per axis", "comma-separated lower corner of the box"),
    ("upper", "1 per axis", "comma-separated upper corner of the box"),
    ("epsilon", "0.2", "interaction radius"),
    ("h", "0.05", "grid spacing; must divide every box extent"),
    ("sigma", "epsilon/2", "Gaussian width"),
    ("mu", "epsilon/2", "inner radius, 0 < mu < epsilon"),
    ("point_budget", "1000000", "maximum number of grid points"),
    ("beta", "1", "diffusion coefficient"),
    ("delta", "0.05", "depreciation rate"),
    ("tau", "0.03", "time discount"),
    ("space_discount", "0", "spatial discount weight"),
    ("rho", "1", "terminal weight"),
    ("xi", "0.1", "regularizer in the productivity exponent"),
    ("horizon", "1", "final time T"),
    ("mp", "1", "production ceiling"),
    ("lambda_p", "1", "production steepness"),
    ("theta", "0.5", "utility curvature, 0 < theta < 1"),
    ("eta", "0.01", "utility shift"),
    ("steps", "20", "number of time steps"),
    ("window_fraction", "0.25", "initial Picard window as a fraction of the horizon"),
    ("picard_tol", "1e-10", "Picard stopping tolerance (energy norm)"),
    ("max_iter", "100", "Picard iterations per window"),
    ("cg_tol", "1e-10", "relative residual of the linear solves"),
    ("cg_max_iter", "10*dofs+100", "iteration budget of the linear solves"),
    ("nonnegativity_threshold", "0", "flag states below -threshold"),
    ("a0", "constant:1", "initial productivity: constant:v | gaussian:amp,cx[,cy],width | file:path"),
    ("k0", "constant:1", "initial capital, same forms as a0"),
    ("k_target", "constant:0", "terminal target, same forms as a0"),
    ("control", "constant:0", "consumption for solve and oracle-check: constant:v | file:path"),
    ("c_min", "0", "lower consumption bound"),
    ("c_max", "mp", "upper consumption bound"),
    ("c_init", "c_min", "starting consumption for optimize"),
    ("opt_tol", "1e-8", "projected-gradient stopping tolerance"),
    ("opt_max_iter", "200", "descent iterations"),
    ("armijo", "1e-4", "sufficient-decrease parameter"),
    ("samples", "100", "random inputs per identity in verify-calculus"),
    ("oracle_points", "5", "interior points sampled by oracle-check"),
    ("sweep_param", "(none)", "key varied by sweep"),
    ("sweep_values", "(none)", "comma-separated values for sweep_param"),
    ("sweep_mode", "solve", "mode run for each sweep value"),
    ("seed", "0", "seed for randomized checks"),
    ("out", "out", "output directory, relative to the config file; --out overrides"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub epsilon: f64,
    pub spacing: f64,
    pub sigma: f64,
    pub mu: f64,
    pub point_budget: usize,
    pub model: ModelParams,
    pub steps: usize,
    pub solver: SolverOptions,
    pub a0: FieldSource,
    pub k0: FieldSource,
    pub k_target: FieldSource,
    pub control: FieldSource,
    pub c_min: f64,
    pub c_max: f64,
    pub c_init: f64,
    pub descent: DescentOptions,
    pub samples: usize,
    pub oracle_points: usize,
    pub sweep_param: Option<String>,
    pub sweep_values: Vec<f64>,
    pub sweep_mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    /// Directory against which relative `file:` paths resolve.
    pub base_dir: PathBuf,
    entries: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::Syntax { line });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !KEYS.iter().any(|(name, _, _)| *name == k) {
            return Err(ConfigError::UnknownKey { line, key: k.to_string() });
        }
        if entries.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::Duplicate { line, key: k.to_string() });
        }
    }
    RunConfig::from_entries(entries)
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>()
        .ok()
        .filter(|x| !x.is_nan())
        .ok_or_else(|| ConfigError::Type { key: key.into(), value: v.into(), expected: "a number" })
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse::<usize>()
        .map_err(|_| ConfigError::Type { key: key.into(), value: v.into(), expected: "a nonnegative integer" })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|s| parse_f64(key, s.trim())).collect()
}

fn parse_source(key: &str, v: &str, allow_gaussian: bool) -> Result<FieldSource, ConfigError> {
    let bad = |expected| ConfigError::Type { key: key.into(), value: v.into(), expected };
    if let Ok(c) = v.parse::<f64>() {
        return Ok(FieldSource::Constant(c));
    }
    let (kind, arg) = v.split_once(':').ok_or_else(|| bad("constant:v, gaussian:... or file:path"))?;
    match kind.trim() {
        "constant" => Ok(FieldSource::Constant(parse_f64(key, arg.trim())?)),
        "file" if !arg.trim().is_empty() => Ok(FieldSource::File(PathBuf::from(arg.trim()))),
        "gaussian" if allow_gaussian => {
            let p = parse_list(key, arg)?;
            let (amplitude, center, width) = match p.as_slice() {
                [a, cx, w] => (*a, [*cx, 0.0], *w),
                [a, cx, cy, w] => (*a, [*cx, *cy], *w),
                _ => return Err(bad("gaussian:amplitude,cx[,cy],width")),
            };
            if !(width > 0.0) {
                return Err(ConfigError::constraint(key, "gaussian width > 0"));
            }
            Ok(FieldSource::Gaussian { amplitude, center, width })
        }
        _ => Err(bad(if allow_gaussian { "constant:v, gaussian:... or file:path" } else { "constant:v or file:path" })),
    }
}

impl RunConfig {
    fn from_entries(entries: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let get = |k: &str| entries.get(k).map(String::as_str);
        let f = |k: &str, d: f64| get(k).map_or(Ok(d), |v| parse_f64(k, v));
        let u = |k: &str, d: usize| get(k).map_or(Ok(d), |v| parse_usize(k, v));

        let mode_text = get("mode").ok_or(ConfigError::MissingMode)?;
        let mode = Mode::parse(mode_text)
            .ok_or_else(|| ConfigError::Type { key: "mode".into(), value: mode_text.into(), expected: "a mode name" })?;

        let dim = u("dim", 1)?;
        if dim != 1 && dim != 2 {
            return Err(ConfigError::constraint("dim", "dim = 1 or dim = 2"));
        }
        let axes = |k: &str, d: f64| -> Result<Vec<f64>, ConfigError> {
            match get(k) {
                None => Ok(vec![d; dim]),
                Some(v) => {
                    let l = parse_list(k, v)?;
                    if l.len() != dim {
                        return Err(ConfigError::constraint(k, format!("{dim} comma-separated values")));
                    }
                    Ok(l)
                }
            }
        };
        let lower = axes("lower", 0.0)?;
        let upper = axes("upper", 1.0)?;
        if lower.iter().zip(&upper).any(|(a, b)| !(b > a)) || lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(ConfigError::constraint("upper", "upper > lower on every axis"));
        }
        let epsilon = f("epsilon", 0.2)?;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ConfigError::constraint("epsilon", "epsilon > 0"));
        }
        let spacing = f("h", 0.05)?;
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(ConfigError::constraint("h", "h > 0"));
        }
        let sigma = f("sigma", epsilon / 2.0)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ConfigError::constraint("sigma", "sigma > 0"));
        }
        let mu = f("mu", epsilon / 2.0)?;
        if !(mu > 0.0 && mu < epsilon) {
            return Err(ConfigError::constraint("mu", "0 < mu < epsilon"));
        }
        let point_budget = u("point_budget", DEFAULT_POINT_BUDGET)?;

        let d = ModelParams::default();
        let model = ModelParams {
            beta: f("beta", d.beta)?,
            delta: f("delta", d.delta)?,
            tau: f("tau", d.tau)?,
            space_discount: f("space_discount", d.space_discount)?,
            rho: f("rho", d.rho)?,
            xi: f("xi", d.xi)?,
            horizon: f("horizon", d.horizon)?,
            mp: f("mp", d.mp)?,
            lambda_p: f("lambda_p", d.lambda_p)?,
            theta: f("theta", d.theta)?,
            eta: f("eta", d.eta)?,
        };
        model.validate().map_err(|e| match e {
            ModelError::Invalid { key, constraint, .. } => ConfigError::constraint(key, constraint),
            other => ConfigError::constraint("model", other.to_string()),
        })?;

        let steps = u("steps", 20)?;
        if steps == 0 {
            return Err(ConfigError::constraint("steps", "steps >= 1"));
        }
        let sd = SolverOptions::default();
        let solver = SolverOptions {
            window_fraction: f("window_fraction", sd.window_fraction)?,
            picard_tol: f("picard_tol", sd.picard_tol)?,
            max_iter: u("max_iter", sd.max_iter)?,
            cg_tol: f("cg_tol", sd.cg_tol)?,
            cg_max_iter: get("cg_max_iter").map(|v| parse_usize("cg_max_iter", v)).transpose()?,
            nonnegativity_threshold: f("nonnegativity_threshold", sd.nonnegativity_threshold)?,
        };
        solver.validate().map_err(|e| match e {
            SolverError::Option { key, constraint } => ConfigError::constraint(key, constraint),
            other => ConfigError::constraint("solver", other.to_string()),
        })?;

        let src = |k: &str, d: f64, gaussian: bool| get(k).map_or(Ok(FieldSource::Constant(d)), |v| parse_source(k, v, gaussian));
        let a0 = src("a0", 1.0, true)?;
        if let FieldSource::Constant(v) | FieldSource::Gaussian { amplitude: v, .. } = a0 {
            if !(v >= 0.0) {
                return Err(ConfigError::constraint("a0", "a0 >= 0"));
            }
        }
        let k0 = src("k0", 1.0, true)?;
        if let FieldSource::Constant(v) | FieldSource::Gaussian { amplitude: v, .. } = k0 {
            if !(v >= 0.0) {
                return Err(ConfigError::constraint("k0", "k0 >= 0"));
            }
        }
        let k_target = src("k_target", 0.0, true)?;
        let control = src("control", 0.0, false)?;

        let c_min = f("c_min", 0.0)?;
        let c_max = f("c_max", model.mp)?;
        if !(c_min >= 0.0 && c_min <= c_max && c_max.is_finite()) {
            return Err(ConfigError::constraint(if c_min < 0.0 { "c_min" } else { "c_max" }, "0 <= c_min <= c_max < inf"));
        }
        let c_init = f("c_init", c_min)?;
        if !(c_init >= c_min && c_init <= c_max) {
            return Err(ConfigError::constraint("c_init", "c_min <= c_init <= c_max"));
        }
        let dd = DescentOptions::default();
        let descent = DescentOptions {
            tol: f("opt_tol", dd.tol)?,
            max_iter: u("opt_max_iter", dd.max_iter)?,
            armijo: f("armijo", dd.armijo)?,
            max_halvings: dd.max_halvings,
        };
        if !(descent.tol > 0.0) {
            return Err(ConfigError::constraint("opt_tol", "opt_tol > 0"));
        }
        if !(descent.armijo > 0.0 && descent.armijo < 1.0) {
            return Err(ConfigError::constraint("armijo", "0 < armijo < 1"));
        }

        let samples = u("samples", 100)?;
        let oracle_points = u("oracle_points", 5)?;
        if oracle_points == 0 {
            return Err(ConfigError::constraint("oracle_points", "oracle_points >= 1"));
        }

        let sweep_param = get("sweep_param").map(str::to_string);
        let sweep_values = get("sweep_values").map(|v| parse_list("sweep_values", v)).transpose()?.unwrap_or_default();
        let sweep_mode = match get("sweep_mode") {
            None => Mode::Solve,
            Some(v) => Mode::parse(v)
                .ok_or_else(|| ConfigError::Type { key: "sweep_mode".into(), value: v.into(), expected: "a mode name" })?,
        };
        if mode == Mode::Sweep {
            let Some(p) = &sweep_param else {
                return Err(ConfigError::constraint("sweep_param", "a parameter name for mode = sweep"));
            };
            let numeric = KEYS.iter().any(|(k, _, _)| k == p)
                && !matches!(p.as_str(), "mode" | "lower" | "upper" | "a0" | "k0" | "k_target" | "control" | "out")
                && !p.starts_with("sweep_");
            if !numeric {
                return Err(ConfigError::constraint("sweep_param", "a known scalar parameter"));
            }
            if sweep_values.is_empty() {
                return Err(ConfigError::constraint("sweep_values", "at least one value"));
            }
            if sweep_mode == Mode::Sweep {
                return Err(ConfigError::constraint("sweep_mode", "a mode other than sweep"));
            }
        }
        let seed = get("seed").map_or(Ok(0), |v| {
            v.parse::<u64>()
                .map_err(|_| ConfigError::Type { key: "seed".into(), value: v.into(), expected: "an unsigned integer" })
        })?;

        let out = PathBuf::from(get("out").unwrap_or("out"));

        Ok(Self {
            mode,
            dim,
            lower,
            upper,
            epsilon,
            spacing,
            sigma,
            mu,
            point_budget,
            model,
            steps,
            solver,
            a0,
            k0,
            k_target,
            control,
            c_min,
            c_max,
            c_init,
            descent,
            samples,
            oracle_points,
            sweep_param,
            sweep_values,
            sweep_mode,
            seed,
            out,
            base_dir: PathBuf::from("."),
            entries,
        })
    }

    /// Re-validates the configuration with one key replaced.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut entries = self.entries.clone();
        entries.insert(key.to_string(), value.to_string());
        let mut c = Self::from_entries(entries)?;
        c.base_dir = self.base_dir.clone();
        Ok(c)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.entries.insert("seed".into(), seed.to_string());
        c
    }

    pub fn resolve(&self, path: &std::path::Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}
