//! Experiment configuration files.
//!
//! A config is a flat TOML table, e.g.
//!
//! ```toml
//! scenario = "tracking2d"
//! m_values = [8, 12, 16, 20]
//! e_tot_values = [5, 10, 15, 20, 25, inf]
//! trials = 100000
//! seed = 1
//! v_diag = [15, inf]
//! ```
//!
//! `scenario = "custom"` reads the plant from `model_file`, another flat
//! table with row-major matrices `F`, `H`, `Q`, `R` and optionally `P0`,
//! `x0`.

use super::CliError;
use crate::energy_optimizer::{PerformanceConstraint, WaterfillSettings};
use crate::kalman::StateSpaceModel;
use crate::memory_model::MemoryNoiseParams;
use crate::scenario::{self, Scenario, DEFAULT_INTEGER_BITS};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_scenario")]
    scenario: String,
    model_file: Option<PathBuf>,
    n: Option<u32>,
    m: Option<u32>,
    m_values: Option<Vec<u32>>,
    e_tot_values: Option<Vec<f64>>,
    #[serde(default = "default_a")]
    a: f64,
    #[serde(default = "default_e_thres")]
    e_thres: f64,
    #[serde(default = "default_horizon")]
    horizon: usize,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default = "default_seed")]
    seed: u64,
    v_diag: Option<Vec<f64>>,
    v: Option<Vec<Vec<f64>>>,
    trace_bound: Option<f64>,
    #[serde(default = "default_mode")]
    mode: String,
    levels: Option<Vec<usize>>,
    #[serde(default = "default_m_max")]
    m_max: u32,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_xi")]
    xi: f64,
}

fn default_scenario() -> String {
    "tracking2d".into()
}
fn default_a() -> f64 {
    12.8
}
fn default_e_thres() -> f64 {
    0.1
}
fn default_horizon() -> usize {
    250
}
fn default_trials() -> usize {
    100_000
}
fn default_seed() -> u64 {
    1
}
fn default_mode() -> String {
    "bitwise".into()
}
fn default_m_max() -> u32 {
    24
}
fn default_beta() -> f64 {
    0.01
}
fn default_xi() -> f64 {
    1e-8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct RawModel {
    F: Vec<Vec<f64>>,
    H: Vec<Vec<f64>>,
    Q: Vec<Vec<f64>>,
    R: Vec<Vec<f64>>,
    P0: Option<Vec<Vec<f64>>>,
    x0: Option<Vec<f64>>,
}

/// What `optimize` solves.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizeMode {
    /// Per-bank energies, searching `m` in `0..=m_max`.
    Bitwise,
    /// `L`-level allocations at a fixed `m`, one per entry.
    Levels(Vec<usize>),
    /// One shared energy at a fixed `m`.
    Uniform,
}

/// A fully resolved experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub scenario: Scenario<f64>,
    pub model_file: Option<PathBuf>,
    pub n: u32,
    pub m: Option<u32>,
    pub m_values: Vec<u32>,
    pub e_tot_values: Vec<f64>,
    pub params: MemoryNoiseParams<f64>,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub constraint: Option<PerformanceConstraint<f64>>,
    pub mode: OptimizeMode,
    pub m_max: u32,
    pub settings: WaterfillSettings<f64>,
}

fn config_error(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn matrix(key: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 {
        return Err(config_error(key, "matrix is empty"));
    }
    if let Some(i) = rows.iter().position(|row| row.len() != c) {
        return Err(config_error(
            key,
            format!("row {i} has {} entries, expected {c}", rows[i].len()),
        ));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn load_model(path: &Path) -> Result<Scenario<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error("model_file", format!("cannot read {}: {e}", path.display())))?;
    let raw: RawModel =
        toml::from_str(&text).map_err(|e| config_error("model_file", format!("{}: {e}", path.display())))?;
    let f = matrix("model_file.F", &raw.F)?;
    let h = matrix("model_file.H", &raw.H)?;
    let q = matrix("model_file.Q", &raw.Q)?;
    let r = matrix("model_file.R", &raw.R)?;
    let model = StateSpaceModel::new(f, h, q.clone(), r).map_err(|e| config_error("model_file", e))?;
    let c = model.state_dim();
    let p0 = match &raw.P0 {
        Some(rows) => matrix("model_file.P0", rows)?,
        None => q,
    };
    if p0.shape() != (c, c) {
        return Err(config_error("model_file.P0", format!("expected {c}x{c}")));
    }
    let x0_mean = match raw.x0 {
        Some(v) if v.len() == c => DVector::from_vec(v),
        Some(v) => {
            return Err(config_error(
                "model_file.x0",
                format!("{} entries, expected {c}", v.len()),
            ))
        }
        None => DVector::zeros(c),
    };
    Ok(Scenario {
        name: "custom".into(),
        model,
        x0_mean,
        p0,
        integer_bits: DEFAULT_INTEGER_BITS,
    })
}

impl ExperimentConfig {
    /// Parses `text`; relative `model_file` paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;

        let (scenario, model_file) = match raw.scenario.as_str() {
            "tracking2d" => (scenario::tracking2d(), None),
            "shift20" => (scenario::shift20(), None),
            "custom" => {
                let rel = raw
                    .model_file
                    .clone()
                    .ok_or_else(|| config_error("model_file", "required when scenario = \"custom\""))?;
                let path = base_dir.join(rel);
                (load_model(&path)?, Some(path))
            }
            other => {
                return Err(config_error(
                    "scenario",
                    format!("unknown preset `{other}` (expected tracking2d, shift20 or custom)"),
                ))
            }
        };
        if raw.model_file.is_some() && model_file.is_none() {
            return Err(config_error("model_file", "only allowed with scenario = \"custom\""));
        }
        let c = scenario.model.state_dim();

        let params = MemoryNoiseParams::new(raw.a, raw.e_thres).map_err(|e| CliError::Config(e.to_string()))?;
        if raw.horizon == 0 {
            return Err(config_error("horizon", "must be at least 1"));
        }

        let n = raw.n.unwrap_or(scenario.integer_bits);
        let m_values = raw.m_values.unwrap_or_default();
        let e_tot_values = raw.e_tot_values.unwrap_or_default();
        if let Some(e) = e_tot_values.iter().find(|e| e.is_nan() || **e < 0.0) {
            return Err(config_error(
                "e_tot_values",
                format!("energies must be non-negative, got {e}"),
            ));
        }

        let bounds = [raw.v_diag.is_some(), raw.v.is_some(), raw.trace_bound.is_some()];
        if bounds.iter().filter(|b| **b).count() > 1 {
            return Err(config_error("v_diag", "give at most one of v_diag, v, trace_bound"));
        }
        let constraint = if let Some(d) = &raw.v_diag {
            if d.len() != c {
                return Err(config_error(
                    "v_diag",
                    format!("{} entries for a {c}-state model", d.len()),
                ));
            }
            Some(PerformanceConstraint::diagonal(d).map_err(|e| config_error("v_diag", e))?)
        } else if let Some(rows) = &raw.v {
            let v = matrix("v", rows)?;
            if v.shape() != (c, c) {
                return Err(config_error("v", format!("expected {c}x{c}")));
            }
            Some(PerformanceConstraint::component_wise(v).map_err(|e| config_error("v", e))?)
        } else if let Some(t) = raw.trace_bound {
            Some(PerformanceConstraint::trace(t).map_err(|e| config_error("trace_bound", e))?)
        } else {
            None
        };

        let mode = match raw.mode.as_str() {
            "bitwise" => OptimizeMode::Bitwise,
            "uniform" => OptimizeMode::Uniform,
            "levels" => {
                let levels = raw.levels.clone().unwrap_or_else(|| (1..=7).collect());
                if levels.is_empty() || levels.contains(&0) {
                    return Err(config_error("levels", "need at least one positive level count"));
                }
                OptimizeMode::Levels(levels)
            }
            other => {
                return Err(config_error(
                    "mode",
                    format!("unknown mode `{other}` (expected bitwise, levels or uniform)"),
                ))
            }
        };
        if raw.levels.is_some() && !matches!(mode, OptimizeMode::Levels(_)) {
            return Err(config_error("levels", "only allowed with mode = \"levels\""));
        }
        let settings = WaterfillSettings {
            beta: raw.beta,
            xi: raw.xi,
            ..WaterfillSettings::default()
        };
        settings.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let cfg = Self {
            scenario,
            model_file,
            n,
            m: raw.m,
            m_values,
            e_tot_values,
            params,
            horizon: raw.horizon,
            trials: raw.trials,
            seed: raw.seed,
            constraint,
            mode,
            m_max: raw.m_max,
            settings,
        };
        cfg.check_formats()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn check_formats(&self) -> Result<(), CliError> {
        let limit = crate::fixedpoint::FixedPointFormat::MAX_BITS;
        let widest = self.m_values.iter().chain(self.m.iter()).chain([&self.m_max]).max();
        if let Some(&m) = widest {
            if self.n + m > limit {
                return Err(config_error(
                    "n",
                    format!("n + m = {} exceeds {limit} bits", self.n + m),
                ));
            }
        }
        if self.n == 0 && self.m_values.contains(&0) {
            return Err(config_error("m_values", "n = 0 needs m >= 1"));
        }
        Ok(())
    }

    /// Grid checks shared by the sweep commands.
    pub fn require_grid(&self) -> Result<(), CliError> {
        if self.m_values.is_empty() {
            return Err(config_error("m_values", "grid is empty"));
        }
        if self.e_tot_values.is_empty() {
            return Err(config_error("e_tot_values", "grid is empty"));
        }
        Ok(())
    }

    pub fn require_trials(&self) -> Result<(), CliError> {
        if self.trials == 0 {
            return Err(config_error("trials", "must be at least 1"));
        }
        Ok(())
    }

    pub fn require_constraint(&self) -> Result<&PerformanceConstraint<f64>, CliError> {
        self.constraint
            .as_ref()
            .ok_or_else(|| config_error("v_diag", "optimize needs a bound: set v_diag, v or trace_bound"))
    }

    pub fn require_m(&self) -> Result<u32, CliError> {
        self.m
            .ok_or_else(|| config_error("m", "this mode needs a fixed number of fractional bits"))
    }

    /// The resolved configuration, one `key = value` per line, in a fixed
    /// order.
    pub fn provenance(&self) -> Vec<String> {
        fn list<T: std::fmt::Display>(v: &[T]) -> String {
            let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("[{}]", items.join(", "))
        }
        let mut out = vec![format!("scenario = {}", self.scenario.name)];
        if let Some(p) = &self.model_file {
            out.push(format!("model_file = {}", p.display()));
        }
        out.push(format!("n = {}", self.n));
        if let Some(m) = self.m {
            out.push(format!("m = {m}"));
        }
        out.push(format!("m_values = {}", list(&self.m_values)));
        out.push(format!("e_tot_values = {}", list(&self.e_tot_values)));
        out.push(format!("a = {}", self.params.a()));
        out.push(format!("e_thres = {}", self.params.e_thres()));
        out.push(format!("horizon = {}", self.horizon));
        out.push(format!("trials = {}", self.trials));
        out.push(format!("seed = {}", self.seed));
        match &self.constraint {
            Some(PerformanceConstraint::ComponentWise(v)) => {
                let mut s = String::from("[");
                for i in 0..v.nrows() {
                    let row: Vec<String> = v.row(i).iter().map(|x| x.to_string()).collect();
                    let _ = write!(s, "{}[{}]", if i > 0 { ", " } else { "" }, row.join(", "));
                }
                s.push(']');
                out.push(format!("v = {s}"));
            }
            Some(PerformanceConstraint::Trace(t)) => out.push(format!("trace_bound = {t}")),
            None => {}
        }
        match &self.mode {
            OptimizeMode::Bitwise => out.push("mode = bitwise".into()),
            OptimizeMode::Uniform => out.push("mode = uniform".into()),
            OptimizeMode::Levels(l) => {
                out.push("mode = levels".into());
                out.push(format!("levels = {}", list(l)));
            }
        }
        out.push(format!("m_max = {}", self.m_max));
        out.push(format!("beta = {}", self.settings.beta));
        out.push(format!("xi = {}", self.settings.xi));
        out
    }
}
