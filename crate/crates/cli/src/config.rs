//! Run configuration: JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use hjkam::flow::SigmaPolicy;
use hjkam::hamiltonian::ModelSpec;
use serde::{Deserialize, Serialize};

/// Failure classes of a run, mapped to exit codes by `main`.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Solver(hjkam::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Solver(_) => 2,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::Solver(e) => write!(f, "solver error: {e}"),
        }
    }
}

impl From<hjkam::Error> for RunError {
    fn from(e: hjkam::Error) -> Self {
        match e {
            hjkam::Error::InvalidInput(m) => RunError::Config(m),
            hjkam::Error::Io { path, message } => RunError::Config(format!("cannot write {path}: {message}")),
            other => RunError::Solver(other),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaConfig {
    /// `declared`, `empirical` or `override`.
    pub policy: String,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub p_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceOverrides {
    pub tol_alpha: Option<f64>,
    pub tol_wk: Option<f64>,
    pub tol_graph: Option<f64>,
    pub t_step: Option<f64>,
    pub t_max: Option<f64>,
    pub mane_t_max: Option<f64>,
}

/// Tolerance set actually used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub tol_alpha: f64,
    pub tol_wk: f64,
    pub tol_graph: f64,
    pub t_step: f64,
    pub t_max: f64,
    pub mane_t_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { tol_alpha: 1e-2, tol_wk: 1e-7, tol_graph: 1e-2, t_step: 0.1, t_max: 100.0, mane_t_max: 4.0 }
    }
}

impl Tolerances {
    fn apply(mut self, o: &ToleranceOverrides) -> Result<Self, RunError> {
        let fields = [
            ("tol_alpha", o.tol_alpha, &mut self.tol_alpha),
            ("tol_wk", o.tol_wk, &mut self.tol_wk),
            ("tol_graph", o.tol_graph, &mut self.tol_graph),
            ("t_step", o.t_step, &mut self.t_step),
            ("t_max", o.t_max, &mut self.t_max),
            ("mane_t_max", o.mane_t_max, &mut self.mane_t_max),
        ];
        for (key, value, slot) in fields {
            if let Some(v) = value {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(RunError::Config(format!("tolerances.{key} must be positive, got {v}")));
                }
                *slot = v;
            }
        }
        Ok(self)
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub model: Option<ModelSpec>,
    pub grid_n: Option<usize>,
    pub tolerances: Option<ToleranceOverrides>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub sigma: Option<SigmaConfig>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            RunError::Config(m) => RunError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Built-in model descriptions usable in place of a file path.
pub fn builtin_model(name: &str) -> Option<ModelSpec> {
    let text = match name {
        "free" => r#"{"family": "free", "d": 1}"#,
        "pendulum" => r#"{"family": "mechanical", "d": 1, "V_coeffs": [{"k": [1], "a": 1.0}], "m": 1.0, "M": 40.0}"#,
        _ => return None,
    };
    Some(ModelSpec::from_json(text).expect("built-in model parses"))
}

/// `--model` argument: an existing file, else a built-in name.
pub fn load_model(arg: &str) -> Result<ModelSpec, RunError> {
    let path = Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        return ModelSpec::from_json(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())));
    }
    builtin_model(arg).ok_or_else(|| RunError::Config(format!("model file {arg} not found and not a built-in name")))
}

pub fn sigma_policy(cfg: Option<&SigmaConfig>, flag_sigma: Option<f64>, flag_p_max: Option<f64>) -> Result<SigmaPolicy, RunError> {
    if let Some(sigma) = flag_sigma {
        let p_max = flag_p_max
            .or(cfg.and_then(|c| c.p_max))
            .ok_or_else(|| RunError::Config("--sigma needs --p-max for the twist check".into()))?;
        return Ok(SigmaPolicy::Override { sigma, p_max });
    }
    let Some(c) = cfg else { return Ok(SigmaPolicy::Declared) };
    match c.policy.as_str() {
        "declared" => Ok(SigmaPolicy::Declared),
        "empirical" => Ok(SigmaPolicy::Empirical),
        "override" => {
            let sigma = c.value.ok_or_else(|| RunError::Config("sigma.value is required for policy override".into()))?;
            let p_max = c.p_max.ok_or_else(|| RunError::Config("sigma.p_max is required for policy override".into()))?;
            Ok(SigmaPolicy::Override { sigma, p_max })
        }
        other => Err(RunError::Config(format!("sigma.policy: unknown policy `{other}`"))),
    }
}

pub fn resolve_tolerances(cfg: &RunConfig) -> Result<Tolerances, RunError> {
    match &cfg.tolerances {
        Some(o) => Tolerances::default().apply(o),
        None => Ok(Tolerances::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::from_json("{\n  \"seed\": 1,\n  \"grdi_n\": 64\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grdi_n") && msg.contains("line 3"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn tolerances_must_be_positive() {
        let cfg = RunConfig::from_json(r#"{"tolerances": {"tol_wk": 0.0}}"#).unwrap();
        assert!(resolve_tolerances(&cfg).is_err());
        let cfg = RunConfig::from_json(r#"{"tolerances": {"tol_wk": 1e-6}}"#).unwrap();
        assert_eq!(resolve_tolerances(&cfg).unwrap().tol_wk, 1e-6);
    }

    #[test]
    fn builtins_build() {
        for name in ["free", "pendulum"] {
            builtin_model(name).unwrap().build().unwrap();
        }
        assert!(load_model("no-such-model").is_err());
    }
}
