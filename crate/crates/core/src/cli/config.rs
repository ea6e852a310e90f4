//! `key = value` configuration files with `[section]` headers.
//!
//! ```text
//! [model]
//! eps_reg = 0.01
//! [run]
//! integrator = gl
//! method = mlmc
//! eps = 1e-3
//! [qoi]
//! kind = smoothed_indicator
//! a = 0.1055
//! b = 0.1555
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Every key
//! must be known to its section.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::PathSetup;
use crate::estimators::{BiasConstants, Method, RunOptions};
use crate::integrators::Integrator;
use crate::model::ModelParams;
use crate::qoi::QoISpec;

pub const DEFAULT_BOX: (f64, f64) = (0.1055, 0.1555);

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Which functional to estimate, before the bin edges are expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QoiKind {
    MeanPosition,
    RawIndicator,
    SmoothedIndicator,
    BinnedField,
}

impl FromStr for QoiKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mean_position" => Ok(QoiKind::MeanPosition),
            "raw_indicator" => Ok(QoiKind::RawIndicator),
            "smoothed_indicator" => Ok(QoiKind::SmoothedIndicator),
            "binned_field" => Ok(QoiKind::BinnedField),
            other => Err(format!(
                "unknown qoi '{other}' (expected mean-position, raw-indicator, smoothed-indicator or binned-field)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiConfig {
    pub kind: QoiKind,
    pub a: f64,
    pub b: f64,
    pub r: usize,
    pub delta: f64,
    pub bins: usize,
}

impl Default for QoiConfig {
    fn default() -> Self {
        Self {
            kind: QoiKind::MeanPosition,
            a: DEFAULT_BOX.0,
            b: DEFAULT_BOX.1,
            r: 4,
            delta: 0.1,
            bins: 20,
        }
    }
}

impl QoiConfig {
    pub fn spec(&self, height: f64) -> QoISpec {
        match self.kind {
            QoiKind::MeanPosition => QoISpec::MeanPosition,
            QoiKind::RawIndicator => QoISpec::RawIndicator { a: self.a, b: self.b },
            QoiKind::SmoothedIndicator => QoISpec::SmoothedIndicator {
                a: self.a,
                b: self.b,
                r: self.r,
                delta: self.delta,
            },
            QoiKind::BinnedField => QoISpec::uniform_bins(self.bins, height, self.r, self.delta),
        }
    }
}

/// Pilot and allocation settings of the multilevel estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmcConfig {
    pub pilot_samples: u64,
    pub pilot_max_level: u32,
    pub max_pilot_samples: u64,
    pub initial_samples: u64,
    pub max_level: u32,
    pub max_iterations: usize,
    /// Known bias model; both or neither of `alpha` and `c1`.
    pub alpha: Option<f64>,
    pub c1: Option<f64>,
}

impl Default for MlmcConfig {
    fn default() -> Self {
        let o = RunOptions::default();
        Self {
            pilot_samples: o.pilot_samples,
            pilot_max_level: o.pilot_max_level,
            max_pilot_samples: o.max_pilot_samples,
            initial_samples: o.initial_samples,
            max_level: o.max_level,
            max_iterations: o.max_iterations,
            alpha: None,
            c1: None,
        }
    }
}

impl MlmcConfig {
    pub fn bias(&self) -> Option<BiasConstants> {
        match (self.alpha, self.c1) {
            (Some(alpha), Some(c1)) => Some(BiasConstants { alpha, c1 }),
            _ => None,
        }
    }
}

/// Level range and tolerances of the diagnostic sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub min_level: u32,
    pub max_level: u32,
    pub samples: u64,
    /// Coarsest level entering the fitted slopes.
    pub fit_from: u32,
    pub eps: Vec<f64>,
    pub methods: Vec<Method>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            min_level: 0,
            max_level: 6,
            samples: 10_000,
            fit_from: 2,
            eps: vec![2e-3, 1e-3, 5e-4, 2e-4],
            methods: vec![Method::Stmc, Method::Mlmc],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelParams,
    pub integrator: Integrator,
    pub method: Method,
    pub qoi: QoiConfig,
    pub t_final: f64,
    pub m0: u64,
    pub eps: f64,
    pub seed: u64,
    pub x0: f64,
    pub u0: f64,
    pub adaptive: bool,
    pub x_adapt: f64,
    pub coupling_signs: bool,
    /// Single-level runs: fixed step count instead of one derived from the
    /// bias model.
    pub stmc_steps: Option<u64>,
    /// Single-level runs: fixed sample count instead of the tolerance rule.
    pub stmc_samples: Option<u64>,
    pub mlmc: MlmcConfig,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let setup = PathSetup::default();
        Self {
            model: setup.params,
            integrator: setup.integrator,
            method: Method::Mlmc,
            qoi: QoiConfig::default(),
            t_final: setup.t_final,
            m0: setup.m0,
            eps: 1e-3,
            seed: 1,
            x0: setup.x0,
            u0: setup.u0,
            adaptive: false,
            x_adapt: 0.05,
            coupling_signs: true,
            stmc_steps: None,
            stmc_samples: None,
            mlmc: MlmcConfig::default(),
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("output"),
        }
    }
}

impl RunConfig {
    pub fn setup(&self) -> PathSetup {
        PathSetup {
            integrator: self.integrator,
            params: self.model,
            x0: self.x0,
            u0: self.u0,
            t_final: self.t_final,
            m0: self.m0,
            x_adapt: self.adaptive.then_some(self.x_adapt),
            coupling_signs: self.coupling_signs,
            noise: true,
        }
    }

    pub fn qoi_spec(&self) -> QoISpec {
        self.qoi.spec(self.model.height)
    }

    pub fn run_options(&self, workers: usize) -> RunOptions {
        RunOptions {
            seed: self.seed,
            workers,
            pilot_samples: self.mlmc.pilot_samples,
            pilot_max_level: self.mlmc.pilot_max_level,
            max_pilot_samples: self.mlmc.max_pilot_samples,
            initial_samples: self.mlmc.initial_samples,
            max_level: self.mlmc.max_level,
            bias: self.mlmc.bias(),
            max_iterations: self.mlmc.max_iterations,
        }
    }

    /// Check every field against the invariants of the module that uses it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: crate::Error| ConfigError::Invalid(e.to_string());
        self.setup().validate().map_err(invalid)?;
        self.qoi_spec().validate(self.model.height).map_err(invalid)?;
        if self.qoi.kind == QoiKind::BinnedField && self.qoi.bins == 0 {
            return Err(ConfigError::Invalid("bins must be >= 1".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(ConfigError::Invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.mlmc.alpha.is_some() != self.mlmc.c1.is_some() {
            return Err(ConfigError::Invalid("mlmc.alpha and mlmc.c1 must be given together".into()));
        }
        if let Some(b) = self.mlmc.bias() {
            if !(b.alpha > 0.0 && b.c1 > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "bias model needs alpha, c1 > 0, got {}, {}",
                    b.alpha, b.c1
                )));
            }
        }
        if self.mlmc.pilot_samples < 2 || self.mlmc.initial_samples < 2 {
            return Err(ConfigError::Invalid("pilot and initial sample counts must be >= 2".into()));
        }
        if self.mlmc.bias().is_none() && self.mlmc.pilot_max_level < 3 {
            return Err(ConfigError::Invalid(
                "the bias fit needs pilot_max_level >= 3 (levels 1..3)".into(),
            ));
        }
        if self.stmc_steps == Some(0) || self.stmc_samples.is_some_and(|n| n < 2) {
            return Err(ConfigError::Invalid("stmc_steps must be >= 1 and stmc_samples >= 2".into()));
        }
        if self.sweep.min_level > self.sweep.max_level {
            return Err(ConfigError::Invalid(format!(
                "sweep levels {}..{} are empty",
                self.sweep.min_level, self.sweep.max_level
            )));
        }
        if self.sweep.samples < 2 {
            return Err(ConfigError::Invalid("sweep samples must be >= 2".into()));
        }
        if self.sweep.eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(ConfigError::Invalid("sweep tolerances must be > 0".into()));
        }
        Ok(())
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| ConfigError::Parse {
        line,
        message: format!("bad value '{raw}' for '{key}': {e}"),
    })
}

fn list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(line, key, s))
        .collect()
}

pub fn parse_switch(raw: &str) -> Result<bool, String> {
    match raw.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected on/off, got '{other}'")),
    }
}

/// Parse configuration text, starting from the defaults, and validate it.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg = parse_unvalidated(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse without the final validation, for callers that apply overrides
/// first.
pub fn parse_unvalidated(text: &str) -> Result<RunConfig, ConfigError> {
    parse_onto(RunConfig::default(), text)
}

/// Apply the settings in `text` on top of `cfg`.
pub fn parse_onto(mut cfg: RunConfig, text: &str) -> Result<RunConfig, ConfigError> {
    let mut section = String::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw_line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
            continue;
        }
        if let Some(rest) = t.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("unterminated section header '{t}'"),
            })?;
            section = name.trim().to_ascii_lowercase();
            if !matches!(
                section.as_str(),
                "model" | "run" | "adaptive" | "qoi" | "mlmc" | "sweep" | "output"
            ) {
                return Err(ConfigError::Parse {
                    line,
                    message: format!("unknown section [{section}]"),
                });
            }
            continue;
        }
        let (key, val) = t.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            message: format!("expected 'key = value', got '{t}'"),
        })?;
        let key = key.trim().to_ascii_lowercase();
        let val = val.trim();
        set(&mut cfg, &section, &key, val, line)?;
    }
    Ok(cfg)
}

fn set(cfg: &mut RunConfig, section: &str, key: &str, v: &str, line: usize) -> Result<(), ConfigError> {
    let k = key;
    match (section, key) {
        ("model", "kappa_sigma") => cfg.model.kappa_sigma = value(line, k, v)?,
        ("model", "kappa_tau") => cfg.model.kappa_tau = value(line, k, v)?,
        ("model", "u_star") => cfg.model.u_star = value(line, k, v)?,
        ("model", "height") => cfg.model.height = value(line, k, v)?,
        ("model", "eps_reg") => cfg.model.eps_reg = value(line, k, v)?,
        ("model", "x_ref") => cfg.model.x_ref = value(line, k, v)?,

        ("run", "integrator") => cfg.integrator = value(line, k, v)?,
        ("run", "method") => cfg.method = value(line, k, v)?,
        ("run", "eps") => cfg.eps = value(line, k, v)?,
        ("run", "seed") => cfg.seed = value(line, k, v)?,
        ("run", "t_final") => cfg.t_final = value(line, k, v)?,
        ("run", "m0") => cfg.m0 = value(line, k, v)?,
        ("run", "x0") => cfg.x0 = value(line, k, v)?,
        ("run", "u0") => cfg.u0 = value(line, k, v)?,
        ("run", "coupling_signs") => {
            cfg.coupling_signs = parse_switch(v).map_err(|message| ConfigError::Parse { line, message })?
        }
        ("run", "stmc_steps") => cfg.stmc_steps = Some(value(line, k, v)?),
        ("run", "stmc_samples") => cfg.stmc_samples = Some(value(line, k, v)?),

        ("adaptive", "enabled") => {
            cfg.adaptive = parse_switch(v).map_err(|message| ConfigError::Parse { line, message })?
        }
        ("adaptive", "x_adapt") => cfg.x_adapt = value(line, k, v)?,

        ("qoi", "kind") => cfg.qoi.kind = value(line, k, v)?,
        ("qoi", "a") => cfg.qoi.a = value(line, k, v)?,
        ("qoi", "b") => cfg.qoi.b = value(line, k, v)?,
        ("qoi", "r") => cfg.qoi.r = value(line, k, v)?,
        ("qoi", "delta") => cfg.qoi.delta = value(line, k, v)?,
        ("qoi", "bins") => cfg.qoi.bins = value(line, k, v)?,

        ("mlmc", "pilot_samples") => cfg.mlmc.pilot_samples = value(line, k, v)?,
        ("mlmc", "pilot_max_level") => cfg.mlmc.pilot_max_level = value(line, k, v)?,
        ("mlmc", "max_pilot_samples") => cfg.mlmc.max_pilot_samples = value(line, k, v)?,
        ("mlmc", "initial_samples") => cfg.mlmc.initial_samples = value(line, k, v)?,
        ("mlmc", "max_level") => cfg.mlmc.max_level = value(line, k, v)?,
        ("mlmc", "max_iterations") => cfg.mlmc.max_iterations = value(line, k, v)?,
        ("mlmc", "alpha") => cfg.mlmc.alpha = Some(value(line, k, v)?),
        ("mlmc", "c1") => cfg.mlmc.c1 = Some(value(line, k, v)?),

        ("sweep", "min_level") => cfg.sweep.min_level = value(line, k, v)?,
        ("sweep", "max_level") => cfg.sweep.max_level = value(line, k, v)?,
        ("sweep", "samples") => cfg.sweep.samples = value(line, k, v)?,
        ("sweep", "fit_from") => cfg.sweep.fit_from = value(line, k, v)?,
        ("sweep", "eps") => cfg.sweep.eps = list(line, k, v)?,
        ("sweep", "methods") => cfg.sweep.methods = list(line, k, v)?,

        ("output", "dir") => cfg.output_dir = PathBuf::from(v),

        ("", _) => {
            return Err(ConfigError::Parse {
                line,
                message: format!("key '{key}' appears before any [section]"),
            })
        }
        _ => {
            return Err(ConfigError::Parse {
                line,
                message: format!("unknown key '{key}' in [{section}]"),
            })
        }
    }
    Ok(())
}
