//! `result.json` records and the CSV tables written next to them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::estimators::{BiasConstants, CostSweep, DecayRow, RunResult};

pub const SCHEMA_VERSION: u32 = 1;

pub const VARIANCE_DECAY_HEADER: &str = "level,h,var_Y,mean_Y,n_samples,cost_steps";
pub const COST_SWEEP_HEADER: &str = "eps,method,integrator,cost_steps,wall_seconds,estimate,stat_error";
pub const PDF_HEADER: &str = "bin_lo,bin_hi,concentration,std_error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub concentration: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySummary {
    pub variance_slope: Option<f64>,
    pub bias_slope: Option<f64>,
    /// Fitted bias model, when every fitted level mean is resolved.
    pub bias: Option<BiasConstants>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub sweep: CostSweep,
    pub stmc_slope: Option<f64>,
    pub mlmc_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Run(RunResult),
    VarianceDecay(DecaySummary),
    BiasDecay(DecaySummary),
    CostSweep(CostSummary),
    Pdf { result: RunResult, rows: Vec<PdfRow> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub wall_seconds: f64,
    pub total_cost_steps: u64,
    pub pilot_cost_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub result: Payload,
    pub levels: Vec<DecayRow>,
    pub timings: Timings,
}

impl OutputRecord {
    pub fn new(command: &str, config: RunConfig, result: Payload, levels: Vec<DecayRow>, timings: Timings) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config,
            result,
            levels,
            timings,
        }
    }

    /// Zero every machine-dependent timing so that repeated runs produce
    /// identical bytes.
    pub fn strip_wall_times(&mut self) {
        self.timings.wall_seconds = 0.0;
        match &mut self.result {
            Payload::Run(r) | Payload::Pdf { result: r, .. } => r.wall_seconds = 0.0,
            Payload::CostSweep(c) => c.sweep.rows.iter_mut().for_each(|r| r.wall_seconds = 0.0),
            Payload::VarianceDecay(_) | Payload::BiasDecay(_) => {}
        }
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        let value = serde_json::to_value(self)?;
        check_finite(&value, "")?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).context("result.json is not valid JSON")?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => bail!("unsupported schema_version {v} (this build reads version {SCHEMA_VERSION})"),
            None => bail!("result.json has no schema_version"),
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// `serde_json` turns NaN and infinities into `null`; fields that are
/// optional by design are the only place a `null` may appear.
fn check_finite(value: &serde_json::Value, path: &str) -> anyhow::Result<()> {
    const OPTIONAL: [&str; 11] = [
        "eps",
        "bias",
        "bias_estimate",
        "alpha",
        "c1",
        "stmc_steps",
        "stmc_samples",
        "variance_slope",
        "bias_slope",
        "stmc_slope",
        "mlmc_slope",
    ];
    match value {
        serde_json::Value::Null => {
            let leaf = path.rsplit('.').next().unwrap_or("");
            if OPTIONAL.contains(&leaf) {
                Ok(())
            } else {
                bail!("non-finite number at {path}")
            }
        }
        serde_json::Value::Array(items) => items
            .iter()
            .enumerate()
            .try_for_each(|(i, v)| check_finite(v, &format!("{path}[{i}]"))),
        serde_json::Value::Object(map) => map
            .iter()
            .try_for_each(|(k, v)| check_finite(v, &format!("{path}.{k}"))),
        _ => Ok(()),
    }
}

/// Fixed-width scientific notation; 17 significant digits round-trip every
/// `f64`.
pub fn fmt_float(x: f64) -> anyhow::Result<String> {
    if !x.is_finite() {
        bail!("refusing to write non-finite value {x}");
    }
    Ok(format!("{x:.16e}"))
}

pub fn variance_decay_csv(rows: &[DecayRow]) -> anyhow::Result<String> {
    let mut s = format!("{VARIANCE_DECAY_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.level,
            fmt_float(r.h)?,
            fmt_float(r.var_y)?,
            fmt_float(r.mean_y)?,
            r.n_samples,
            r.cost_steps
        )?;
    }
    Ok(s)
}

pub fn cost_sweep_csv(sweep: &CostSweep) -> anyhow::Result<String> {
    let mut s = format!("{COST_SWEEP_HEADER}\n");
    for r in &sweep.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_float(r.eps)?,
            r.method.name(),
            r.integrator,
            r.cost_steps,
            fmt_float(r.wall_seconds)?,
            fmt_float(r.estimate)?,
            fmt_float(r.stat_error)?
        )?;
    }
    Ok(s)
}

pub fn pdf_csv(rows: &[PdfRow]) -> anyhow::Result<String> {
    let mut s = format!("{PDF_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{}",
            fmt_float(r.bin_lo)?,
            fmt_float(r.bin_hi)?,
            fmt_float(r.concentration)?,
            fmt_float(r.std_error)?
        )?;
    }
    Ok(s)
}

/// Write `result.json` plus the named CSV tables into `dir`.
pub fn write_outputs(record: &OutputRecord, tables: &[(&str, String)], dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = Vec::new();
    let json = dir.join("result.json");
    fs::write(&json, record.to_json()?).with_context(|| format!("cannot write {}", json.display()))?;
    written.push(json);
    for (name, body) in tables {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_record(path: &Path) -> anyhow::Result<OutputRecord> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    OutputRecord::from_json(&text)
}
