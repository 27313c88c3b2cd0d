//! Run configuration: a JSON document parsed with JSON-pointer error paths.
//!
//! ```json
//! {
//!   "problem": {
//!     "sigma_lo": 0.6, "sigma_hi": 1.0,
//!     "terminal": "x^2", "driver": "-0.1*y", "driver_g": null,
//!     "lower": "-1-0.1*t", "upper": "0.2*exp(-t)+0.05*x",
//!     "lipschitz": 0.1, "clamp_terminal": true, "x0": 0.0
//!   },
//!   "lattice": { "T": 1.0, "N": 400 },
//!   "ladder": [4, 8, 16, 32, 64, 128, 256],
//!   "penalty": 256,
//!   "diagnostics": { "alpha": 2.0 },
//!   "output": "out"
//! }
//! ```
//!
//! Only `problem.sigma_lo`, `problem.sigma_hi`, `problem.terminal` and
//! `lattice` are required.

use std::fs;
use std::path::{Path, PathBuf};

use gbsde::diagnostics::DiagnosticsConfig;
use gbsde::expr::{evaluate, parse_expression, Bindings, Expr};
use gbsde::lattice::{GParams, LatticeSpec};
use gbsde::solver::{PenaltyLevel, ProblemSpec, SolverError, DEFAULT_LADDER};
use serde_json::{Map, Value};
use thiserror::Error;

/// Half-width of the `(y, z)` box sampled by [`estimate_lipschitz`].
const LIPSCHITZ_BOX: f64 = 10.0;
const LIPSCHITZ_GRID: usize = 9;
const LIPSCHITZ_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    /// JSON pointer of the offending value (empty for the whole document).
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: ProblemSpec,
    pub lattice: LatticeSpec,
    pub ladder: Vec<PenaltyLevel>,
    pub penalty: PenaltyLevel,
    pub diagnostics: DiagnosticsConfig,
    pub output: Option<PathBuf>,
    /// Set when `lipschitz` was omitted and estimated instead.
    pub estimated_lipschitz: Option<f64>,
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| ConfigError::new("", format!("invalid JSON: {e}")))?;
    parse_config(&doc)
}

struct Obj<'a> {
    path: String,
    map: &'a Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn root(v: &'a Value) -> Result<Self, ConfigError> {
        Self::from_value(String::new(), v)
    }

    fn from_value(path: String, v: &'a Value) -> Result<Self, ConfigError> {
        match v {
            Value::Object(map) => Ok(Self { path, map }),
            other => Err(ConfigError::new(
                path,
                format!("expected an object, got {}", kind(other)),
            )),
        }
    }

    fn ptr(&self, key: &str) -> String {
        format!("{}/{key}", self.path)
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.map.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::new(self.ptr(k), "unknown field")),
            None => Ok(()),
        }
    }

    /// Absent and `null` are both treated as missing.
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn require(&self, key: &str) -> Result<&'a Value, ConfigError> {
        self.get(key)
            .ok_or_else(|| ConfigError::new(self.ptr(key), "missing field"))
    }

    fn object(&self, key: &str) -> Result<Obj<'a>, ConfigError> {
        Obj::from_value(self.ptr(key), self.require(key)?)
    }

    fn number(&self, key: &str) -> Result<f64, ConfigError> {
        as_number(&self.ptr(key), self.require(key)?)
    }

    fn opt_number(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.get(key).map(|v| as_number(&self.ptr(key), v)).transpose()
    }

    fn opt_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        self.get(key)
            .map(|v| v.as_bool().ok_or_else(|| type_error(&self.ptr(key), "a boolean", v)))
            .transpose()
    }

    fn opt_string(&self, key: &str) -> Result<Option<&'a str>, ConfigError> {
        self.get(key)
            .map(|v| v.as_str().ok_or_else(|| type_error(&self.ptr(key), "a string", v)))
            .transpose()
    }

    fn expr(&self, key: &str) -> Result<Option<Expr>, ConfigError> {
        let Some(src) = self.opt_string(key)? else {
            return Ok(None);
        };
        parse_expression(src)
            .map(Some)
            .map_err(|e| ConfigError::new(self.ptr(key), format!("syntax error at offset {}: {e}", e.offset())))
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn type_error(path: &str, expected: &str, got: &Value) -> ConfigError {
    ConfigError::new(path, format!("expected {expected}, got {}", kind(got)))
}

fn as_number(path: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64().ok_or_else(|| type_error(path, "a number", v))
}

fn as_steps(path: &str, v: &Value) -> Result<usize, ConfigError> {
    v.as_u64()
        .filter(|&n| n >= 1)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| ConfigError::new(path, format!("expected an integer >= 1, got {v}")))
}

/// Attaches the JSON pointer of the field a solver error refers to.
fn solver_error(problem: &str, e: SolverError) -> ConfigError {
    let field = match &e {
        SolverError::Parse { role, .. } | SolverError::VariableNotAllowed { role, .. } => format!("/{role}"),
        SolverError::InvalidLipschitz(_) | SolverError::LipschitzViolation { .. } => "/lipschitz".into(),
        _ => String::new(),
    };
    ConfigError::new(format!("{problem}{field}"), e.to_string())
}

pub fn parse_config(doc: &Value) -> Result<RunConfig, ConfigError> {
    let root = Obj::root(doc)?;
    root.reject_unknown(&["problem", "lattice", "ladder", "penalty", "diagnostics", "output"])?;

    let lat = root.object("lattice")?;
    lat.reject_unknown(&["T", "N"])?;
    let horizon = lat.number("T")?;
    let steps = as_steps(&lat.ptr("N"), lat.require("N")?)?;

    let prob = root.object("problem")?;
    prob.reject_unknown(&[
        "sigma_lo",
        "sigma_hi",
        "terminal",
        "driver",
        "driver_g",
        "lower",
        "upper",
        "lipschitz",
        "clamp_terminal",
        "x0",
    ])?;
    let params = GParams::new(prob.number("sigma_lo")?, prob.number("sigma_hi")?)
        .map_err(|e| ConfigError::new(prob.path.clone(), e.to_string()))?;
    let terminal = prob
        .expr("terminal")?
        .ok_or_else(|| ConfigError::new(prob.ptr("terminal"), "missing field"))?;
    let wrap = |e: SolverError| solver_error(&prob.path, e);
    let horizon_err = |e: SolverError| ConfigError::new(lat.ptr("T"), e.to_string());
    let mut spec = ProblemSpec::new(params, horizon, terminal).map_err(|e| match e {
        SolverError::Lattice(_) => horizon_err(e),
        e => wrap(e),
    })?;
    if let Some(f) = prob.expr("driver")? {
        spec = spec.with_driver(f).map_err(wrap)?;
    }
    spec = spec.with_driver_g(prob.expr("driver_g")?).map_err(wrap)?;
    spec = spec.with_lower(prob.expr("lower")?).map_err(wrap)?;
    spec = spec.with_upper(prob.expr("upper")?).map_err(wrap)?;
    if prob.opt_bool("clamp_terminal")?.unwrap_or(false) {
        spec = spec.with_clamped_terminal();
    }
    let x0 = prob.opt_number("x0")?.unwrap_or(0.0);
    let lattice = spec
        .lattice(steps, x0)
        .map_err(|e| ConfigError::new(lat.path.clone(), e.to_string()))?;

    let (lipschitz, estimated) = match prob.opt_number("lipschitz")? {
        Some(k) => (k, None),
        None => {
            let k = estimate_lipschitz(&spec, &lattice).map_err(|m| ConfigError::new(prob.ptr("driver"), m))?;
            log::warn!("lipschitz not given; using sampled estimate {k:e} (heuristic)");
            (k, Some(k))
        }
    };
    spec = spec.with_lipschitz(lipschitz).map_err(wrap)?;
    spec.validate_on(&lattice).map_err(wrap)?;

    let ladder = match root.get("ladder") {
        None => DEFAULT_LADDER.to_vec(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| as_number(&format!("/ladder/{i}"), v))
            .collect::<Result<_, _>>()?,
        Some(v) => return Err(type_error("/ladder", "an array", v)),
    };
    if ladder.is_empty() {
        return Err(ConfigError::new("/ladder", "must be nonempty"));
    }
    let ladder = ladder
        .iter()
        .enumerate()
        .map(|(i, &n)| PenaltyLevel::new(n).map_err(|e| ConfigError::new(format!("/ladder/{i}"), e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(i) = ladder.windows(2).position(|w| w[1].value() <= w[0].value()) {
        return Err(ConfigError::new(
            format!("/ladder/{}", i + 1),
            "ladder must be strictly increasing",
        ));
    }

    let penalty = match root.opt_number("penalty")? {
        Some(n) => PenaltyLevel::new(n).map_err(|e| ConfigError::new("/penalty", e.to_string()))?,
        None => *ladder.last().expect("nonempty"),
    };

    let diagnostics: DiagnosticsConfig = match root.get("diagnostics") {
        None => DiagnosticsConfig::default(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| ConfigError::new("/diagnostics", e.to_string()))?,
    };
    diagnostics
        .validate()
        .map_err(|e| ConfigError::new("/diagnostics/alpha", e.to_string()))?;

    let output = root.opt_string("output")?.map(PathBuf::from);

    Ok(RunConfig {
        spec,
        lattice,
        ladder,
        penalty,
        diagnostics,
        output,
        estimated_lipschitz: estimated,
    })
}

/// Heuristic Lipschitz constant in `(y, z)`: the largest Euclidean norm of
/// central finite-difference gradients of `f` and `g` over the lattice's
/// `(t, x)` range and the box `|y|, |z| ≤ 10`.
pub fn estimate_lipschitz(spec: &ProblemSpec, lattice: &LatticeSpec) -> Result<f64, String> {
    let n = lattice.steps();
    let ts: Vec<f64> = (0..LIPSCHITZ_GRID)
        .map(|i| lattice.time(i * n / (LIPSCHITZ_GRID - 1)))
        .collect();
    let xs: Vec<f64> = (0..LIPSCHITZ_GRID)
        .map(|i| {
            let frac = i as f64 / (LIPSCHITZ_GRID - 1) as f64;
            lattice.x(((2.0 * frac - 1.0) * n as f64).round() as i64)
        })
        .collect();
    let ys: Vec<f64> = (0..LIPSCHITZ_GRID)
        .map(|i| LIPSCHITZ_BOX * (2.0 * i as f64 / (LIPSCHITZ_GRID - 1) as f64 - 1.0))
        .collect();
    let mut best: f64 = 0.0;
    for e in std::iter::once(spec.driver()).chain(spec.driver_g()) {
        let f = |t, x, y, z| evaluate(e, &Bindings::txyz(t, x, y, z)).map_err(|err| err.to_string());
        for &t in &ts {
            for &x in &xs {
                for &y in &ys {
                    for &z in &ys {
                        let h = LIPSCHITZ_STEP;
                        let dy = (f(t, x, y + h, z)? - f(t, x, y - h, z)?) / (2.0 * h);
                        let dz = (f(t, x, y, z + h)? - f(t, x, y, z - h)?) / (2.0 * h);
                        let norm = dy.hypot(dz);
                        if norm.is_finite() {
                            best = best.max(norm);
                        }
                    }
                }
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "problem": { "sigma_lo": 0.5, "sigma_hi": 1.0, "terminal": "x^2", "lipschitz": 0.0 },
            "lattice": { "T": 1.0, "N": 10 }
        })
    }

    fn err(doc: Value) -> ConfigError {
        parse_config(&doc).unwrap_err()
    }

    #[test]
    fn minimal_config_has_no_obstacles() {
        let c = parse_config(&minimal()).unwrap();
        assert!(c.spec.lower().is_none() && c.spec.upper().is_none());
        assert_eq!(c.lattice.steps(), 10);
        assert_eq!(c.penalty.value(), 256.0);
        assert_eq!(c.ladder.len(), DEFAULT_LADDER.len());
        assert!(c.estimated_lipschitz.is_none());
    }

    #[test]
    fn missing_fields_have_pointers() {
        let mut d = minimal();
        d["problem"].as_object_mut().unwrap().remove("terminal");
        assert_eq!(err(d).path, "/problem/terminal");
        let mut d = minimal();
        d["lattice"].as_object_mut().unwrap().remove("N");
        assert_eq!(err(d).path, "/lattice/N");
        let mut d = minimal();
        d.as_object_mut().unwrap().remove("problem");
        assert_eq!(err(d).path, "/problem");
    }

    #[test]
    fn type_mismatches() {
        let mut d = minimal();
        d["problem"]["sigma_hi"] = json!("one");
        let e = err(d);
        assert_eq!(e.path, "/problem/sigma_hi");
        assert!(e.message.contains("expected a number"));
        let mut d = minimal();
        d["lattice"]["N"] = json!(2.5);
        assert_eq!(err(d).path, "/lattice/N");
        let mut d = minimal();
        d["ladder"] = json!([4, "8"]);
        assert_eq!(err(d).path, "/ladder/1");
    }

    #[test]
    fn syntax_errors_are_positioned() {
        let mut d = minimal();
        d["problem"]["upper"] = json!("1 + * x");
        let e = err(d);
        assert_eq!(e.path, "/problem/upper");
        assert!(e.message.contains("offset 4"), "{}", e.message);
    }

    #[test]
    fn forbidden_variable_points_at_field() {
        let mut d = minimal();
        d["problem"]["lower"] = json!("y - 1");
        assert_eq!(err(d).path, "/problem/lower");
    }

    #[test]
    fn crossing_obstacles_report_location() {
        let mut d = minimal();
        d["problem"]["lower"] = json!("x - 1");
        d["problem"]["upper"] = json!("1");
        d["problem"]["terminal"] = json!("0");
        d["problem"]["clamp_terminal"] = json!(true);
        let e = err(d);
        assert_eq!(e.path, "/problem");
        assert!(
            e.message.contains("step") && e.message.contains("offset"),
            "{}",
            e.message
        );
    }

    #[test]
    fn ladder_must_increase() {
        let mut d = minimal();
        d["ladder"] = json!([4, 16, 8]);
        assert_eq!(err(d).path, "/ladder/2");
        let mut d = minimal();
        d["ladder"] = json!([]);
        assert_eq!(err(d).path, "/ladder");
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut d = minimal();
        d["problem"]["sigma"] = json!(1.0);
        assert_eq!(err(d).path, "/problem/sigma");
    }

    #[test]
    fn lipschitz_estimated_when_absent() {
        let mut d = minimal();
        d["problem"].as_object_mut().unwrap().remove("lipschitz");
        d["problem"]["driver"] = json!("-0.3*y + 0.4*z");
        let c = parse_config(&d).unwrap();
        let k = c.estimated_lipschitz.unwrap();
        assert!((k - 0.5).abs() < 1e-6, "{k}");
        assert_eq!(c.spec.lipschitz(), k);
    }

    #[test]
    fn lipschitz_estimate_covers_g() {
        let mut d = minimal();
        d["problem"].as_object_mut().unwrap().remove("lipschitz");
        d["problem"]["driver"] = json!("0.1*y");
        d["problem"]["driver_g"] = json!("sin_free(y)");
        assert_eq!(err(d).path, "/problem/driver_g");
        let mut d = minimal();
        d["problem"].as_object_mut().unwrap().remove("lipschitz");
        d["problem"]["driver"] = json!("0.1*y");
        d["problem"]["driver_g"] = json!("0.7*abs(y)");
        let k = parse_config(&d).unwrap().estimated_lipschitz.unwrap();
        assert!((k - 0.7).abs() < 1e-6, "{k}");
    }

    #[test]
    fn diagnostics_section() {
        let mut d = minimal();
        d["diagnostics"] = json!({ "alpha": 3.0, "tolerances": { "r_squared_min": 0.9 } });
        let c = parse_config(&d).unwrap();
        assert_eq!(c.diagnostics.alpha, 3.0);
        assert_eq!(c.diagnostics.tolerances.r_squared_min, 0.9);
        let mut d = minimal();
        d["diagnostics"] = json!({ "alpha": 1.0 });
        assert_eq!(err(d).path, "/diagnostics/alpha");
    }
}
