//! Command-line front end: configuration, experiment orchestration and
//! result files.

pub mod config;
pub mod output;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::estimators::{
    bias_model, bias_pilot, bias_slope, cost_slope, cost_sweep, decay_sweep, estimate_bias_constants,
    run_mlmc, run_stmc, stmc_steps_for, variance_slope, DecayRow, LevelStats, Method, RunResult,
    Sampler, StmcTarget,
};
use crate::integrators::Integrator;
use config::{parse_onto, parse_switch, QoiKind, RunConfig};
use output::{
    cost_sweep_csv, pdf_csv, variance_decay_csv, write_outputs, CostSummary, DecaySummary, OutputRecord,
    Payload, PdfRow, Timings,
};

pub const OUTPUT_DIR_ENV: &str = "DISPERSION_MLMC_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "dispersion-mlmc", version, about = "Standard and multilevel Monte Carlo for vertical particle dispersion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Estimate the configured quantity of interest.
    Run,
    /// Variance and mean of the level differences on each level.
    VarianceDecay,
    /// Level-difference means, refined until resolved, and the fitted bias model.
    BiasDecay,
    /// Cost against tolerance for single-level and multilevel estimators.
    CostSweep,
    /// Binned concentration field of the terminal position.
    Pdf,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::VarianceDecay => "variance-decay",
            Command::BiasDecay => "bias-decay",
            Command::CostSweep => "cost-sweep",
            Command::Pdf => "pdf",
        }
    }
}

/// Overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub method: Option<Method>,
    #[arg(long, global = true)]
    pub integrator: Option<Integrator>,
    /// mean-position, raw-indicator, smoothed-indicator or binned-field.
    #[arg(long, global = true)]
    pub qoi: Option<QoiKind>,
    /// Root-mean-square error tolerance.
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Output directory; defaults to the config value, then to
    /// $DISPERSION_MLMC_OUTPUT_DIR, then to ./output.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Use adaptive timestepping.
    #[arg(long, global = true)]
    pub adaptive: bool,
    /// Reference height of the adaptive step rule (implies --adaptive).
    #[arg(long, global = true)]
    pub x_adapt: Option<f64>,
    /// Release height X_0.
    #[arg(long, global = true)]
    pub release: Option<f64>,
    /// Reflection parities in the level coupling: on or off.
    #[arg(long, global = true, value_parser = parse_switch)]
    pub coupling_signs: Option<bool>,
    /// Number of equal bins for binned fields.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Write zero wall-clock times so repeated runs give identical files.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

/// Defaults, then the output-directory variable, then the config file, then
/// the flags; validated.
pub fn resolve_config(flags: &Flags, env_output_dir: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(dir) = env_output_dir {
        cfg.output_dir = dir;
    }
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        cfg = parse_onto(cfg, &text).with_context(|| format!("in {}", path.display()))?;
    }
    apply_flags(&mut cfg, flags);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, f: &Flags) {
    if let Some(v) = f.method {
        cfg.method = v;
    }
    if let Some(v) = f.integrator {
        cfg.integrator = v;
    }
    if let Some(v) = f.qoi {
        cfg.qoi.kind = v;
    }
    if let Some(v) = f.eps {
        cfg.eps = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = &f.output_dir {
        cfg.output_dir = v.clone();
    }
    if f.adaptive {
        cfg.adaptive = true;
    }
    if let Some(v) = f.x_adapt {
        cfg.adaptive = true;
        cfg.x_adapt = v;
    }
    if let Some(v) = f.release {
        cfg.x0 = v;
    }
    if let Some(v) = f.coupling_signs {
        cfg.coupling_signs = v;
    }
    if let Some(v) = f.bins {
        cfg.qoi.bins = v;
    }
}

/// Result of one command: the record and the files written.
#[derive(Debug)]
pub struct Outcome {
    pub record: OutputRecord,
    pub files: Vec<PathBuf>,
}

/// Run `command` with a resolved configuration and write its outputs into
/// `cfg.output_dir`.
pub fn run_command(command: Command, cfg: &RunConfig, workers: usize, deterministic: bool) -> anyhow::Result<Outcome> {
    let (mut record, tables) = match command {
        Command::Run => run_estimate(cfg, workers)?,
        Command::VarianceDecay => run_variance_decay(cfg, workers)?,
        Command::BiasDecay => run_bias_decay(cfg, workers)?,
        Command::CostSweep => run_cost_sweep(cfg, workers)?,
        Command::Pdf => run_pdf(cfg, workers)?,
    };
    if deterministic {
        record.strip_wall_times();
    }
    let table_refs: Vec<(&str, String)> = tables.iter().map(|(n, b)| (*n, b.clone())).collect();
    let files = write_outputs(&record, &table_refs, &cfg.output_dir)?;
    Ok(Outcome { record, files })
}

type Tables = Vec<(&'static str, String)>;

fn level_rows(stats: &[LevelStats]) -> Vec<DecayRow> {
    stats.iter().map(DecayRow::from_stats).collect()
}

fn timings(r: &RunResult) -> Timings {
    Timings {
        wall_seconds: r.wall_seconds,
        total_cost_steps: r.total_cost_steps,
        pilot_cost_steps: r.pilot_cost_steps,
    }
}

/// Single- or multilevel estimate of the configured functional.
pub fn estimate(cfg: &RunConfig, workers: usize) -> anyhow::Result<RunResult> {
    let setup = cfg.setup();
    let qoi = cfg.qoi_spec().compile()?;
    let opts = cfg.run_options(workers);
    let result = match cfg.method {
        Method::Mlmc => run_mlmc(&setup, &qoi, cfg.eps, &opts)?,
        Method::Stmc => {
            let (steps, pilot_cost, bias) = match cfg.stmc_steps {
                Some(m) => (m, 0, opts.bias),
                None => {
                    let (b, cost) = bias_model(&setup, &qoi, &opts)?;
                    (stmc_steps_for(b, cfg.eps, cfg.t_final), cost, Some(b))
                }
            };
            let target = match cfg.stmc_samples {
                Some(n) => StmcTarget::Samples(n),
                None => StmcTarget::Tolerance(cfg.eps),
            };
            let run_opts = crate::estimators::RunOptions { bias, ..opts };
            let mut r = run_stmc(&setup, &qoi, steps, target, &run_opts)?;
            r.pilot_cost_steps = pilot_cost;
            r
        }
    };
    Ok(result)
}

fn run_estimate(cfg: &RunConfig, workers: usize) -> anyhow::Result<(OutputRecord, Tables)> {
    let r = estimate(cfg, workers)?;
    for (i, (e, s)) in r.estimate.iter().zip(&r.stat_error).enumerate() {
        info!("component {i}: {e:.6} +/- {s:.2e}");
    }
    let record = OutputRecord::new("run", cfg.clone(), Payload::Run(r.clone()), level_rows(&r.levels), timings(&r));
    Ok((record, Vec::new()))
}

fn fitted_rows(rows: &[DecayRow], from: u32) -> Vec<DecayRow> {
    rows.iter().copied().filter(|r| r.level >= from.max(1)).collect()
}

fn decay_summary(stats: &[LevelStats], fit_from: u32) -> DecaySummary {
    let rows = level_rows(stats);
    let var_rows = fitted_rows(&rows, fit_from);
    let bias_rows = fitted_rows(&rows, 1);
    let bias = match estimate_bias_constants(stats) {
        Ok(b) => Some(b),
        Err(e) => {
            warn!("no bias model: {e}");
            None
        }
    };
    DecaySummary {
        variance_slope: (var_rows.len() >= 2).then(|| variance_slope(&var_rows)),
        bias_slope: (bias_rows.len() >= 2).then(|| bias_slope(&bias_rows)),
        bias,
    }
}

fn sweep_timings(stats: &[LevelStats], wall: f64) -> Timings {
    Timings {
        wall_seconds: wall,
        total_cost_steps: stats.iter().map(|s| s.cost_steps).sum(),
        pilot_cost_steps: 0,
    }
}

fn run_variance_decay(cfg: &RunConfig, workers: usize) -> anyhow::Result<(OutputRecord, Tables)> {
    let start = std::time::Instant::now();
    let setup = cfg.setup();
    let qoi = cfg.qoi_spec().compile()?;
    let opts = cfg.run_options(workers);
    let stats = decay_sweep(&setup, &qoi, cfg.sweep.min_level..=cfg.sweep.max_level, cfg.sweep.samples, &opts)?;
    let summary = decay_summary(&stats, cfg.sweep.fit_from);
    if let Some(s) = summary.variance_slope {
        info!("variance slope {s:.3}");
    }
    let rows = level_rows(&stats);
    let csv = variance_decay_csv(&rows)?;
    let record = OutputRecord::new(
        "variance-decay",
        cfg.clone(),
        Payload::VarianceDecay(summary),
        rows,
        sweep_timings(&stats, start.elapsed().as_secs_f64()),
    );
    Ok((record, vec![("variance_decay.csv", csv)]))
}

fn run_bias_decay(cfg: &RunConfig, workers: usize) -> anyhow::Result<(OutputRecord, Tables)> {
    let start = std::time::Instant::now();
    let setup = cfg.setup();
    setup.validate()?;
    let qoi = cfg.qoi_spec().compile()?;
    let sampler = Sampler::new(&setup, &qoi, cfg.seed, workers)?;
    let (stats, bias) = bias_pilot(&sampler, cfg.sweep.max_level, cfg.sweep.samples, cfg.mlmc.max_pilot_samples)?;
    info!("bias model alpha = {:.3}, c1 = {:.4}", bias.alpha, bias.c1);
    let mut summary = decay_summary(&stats, cfg.sweep.fit_from);
    summary.bias = Some(bias);
    let rows = level_rows(&stats);
    let csv = variance_decay_csv(&rows)?;
    let record = OutputRecord::new(
        "bias-decay",
        cfg.clone(),
        Payload::BiasDecay(summary),
        rows,
        sweep_timings(&stats, start.elapsed().as_secs_f64()),
    );
    Ok((record, vec![("bias_decay.csv", csv)]))
}

fn run_cost_sweep(cfg: &RunConfig, workers: usize) -> anyhow::Result<(OutputRecord, Tables)> {
    let start = std::time::Instant::now();
    let setup = cfg.setup();
    let qoi = cfg.qoi_spec().compile()?;
    let opts = cfg.run_options(workers);
    let sweep = cost_sweep(&setup, &qoi, &cfg.sweep.eps, &cfg.sweep.methods, &opts)?;
    let slope = |m: Method| {
        let n = sweep.rows.iter().filter(|r| r.method == m).count();
        (n >= 2).then(|| cost_slope(&sweep.rows, m))
    };
    let summary = CostSummary {
        stmc_slope: slope(Method::Stmc),
        mlmc_slope: slope(Method::Mlmc),
        sweep,
    };
    let csv = cost_sweep_csv(&summary.sweep)?;
    let t = Timings {
        wall_seconds: start.elapsed().as_secs_f64(),
        total_cost_steps: summary.sweep.rows.iter().map(|r| r.cost_steps).sum::<u64>() + summary.sweep.pilot_cost_steps,
        pilot_cost_steps: summary.sweep.pilot_cost_steps,
    };
    let record = OutputRecord::new("cost-sweep", cfg.clone(), Payload::CostSweep(summary), Vec::new(), t);
    Ok((record, vec![("cost_sweep.csv", csv)]))
}

fn run_pdf(cfg: &RunConfig, workers: usize) -> anyhow::Result<(OutputRecord, Tables)> {
    let mut cfg = cfg.clone();
    cfg.qoi.kind = QoiKind::BinnedField;
    cfg.validate()?;
    let r = estimate(&cfg, workers)?;
    let k = cfg.qoi.bins;
    let height = cfg.model.height;
    let rows: Vec<PdfRow> = (0..k)
        .map(|i| PdfRow {
            bin_lo: height * i as f64 / k as f64,
            bin_hi: height * (i + 1) as f64 / k as f64,
            concentration: r.estimate[i],
            std_error: r.stat_error[i],
        })
        .collect();
    let csv = pdf_csv(&rows)?;
    let record = OutputRecord::new(
        "pdf",
        cfg.clone(),
        Payload::Pdf { result: r.clone(), rows },
        level_rows(&r.levels),
        timings(&r),
    );
    Ok((record, vec![("pdf.csv", csv)]))
}

/// Entry point of the binary.
pub fn main_with(cli: Cli) -> anyhow::Result<()> {
    let env_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    let cfg = resolve_config(&cli.flags, env_dir)?;
    let outcome = run_command(cli.command, &cfg, cli.flags.workers, cli.flags.deterministic)?;
    print_summary(&outcome.record);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn print_summary(record: &OutputRecord) {
    match &record.result {
        Payload::Run(r) => {
            let c = r.levels.first().map_or(0, LevelStats::dominant_component);
            println!(
                "{} {}: estimate {:.6} +/- {:.2e} ({} levels, {} steps)",
                r.method.name(),
                r.integrator,
                r.estimate[c],
                r.stat_error[c],
                r.levels.len(),
                r.total_cost_steps
            );
        }
        Payload::VarianceDecay(s) | Payload::BiasDecay(s) => {
            for row in &record.levels {
                println!(
                    "level {:2}  h {:.3e}  var {:.3e}  mean {:+.3e}  n {}",
                    row.level, row.h, row.var_y, row.mean_y, row.n_samples
                );
            }
            if let Some(v) = s.variance_slope {
                println!("variance slope {v:.3}");
            }
            if let Some(b) = s.bias_slope {
                println!("bias slope {b:.3}");
            }
            if let Some(b) = s.bias {
                println!("bias model alpha {:.3}, c1 {:.4e}", b.alpha, b.c1);
            }
        }
        Payload::CostSweep(c) => {
            for r in &c.sweep.rows {
                println!("eps {:.2e}  {}  cost {} steps", r.eps, r.method.name(), r.cost_steps);
            }
            if let Some(s) = c.stmc_slope {
                println!("stmc cost slope {s:.3}");
            }
            if let Some(s) = c.mlmc_slope {
                println!("mlmc cost slope {s:.3}");
            }
        }
        Payload::Pdf { rows, .. } => {
            let total: f64 = rows.iter().map(|r| r.concentration).sum();
            println!("{} bins, total mass {total:.6}", rows.len());
        }
    }
}
