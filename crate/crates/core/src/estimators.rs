//! Standard and multilevel Monte Carlo drivers.
//!
//! Samples are generated in fixed-size chunks of consecutive sample indices.
//! Each chunk is accumulated sequentially and the chunk partial sums are
//! merged in index order, so results are bit-identical for any number of
//! worker threads.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{coupled_paths_many, simulate_paths, NoiseStream, PathSetup, LANES, STMC_LEVEL};
use crate::error::{Error, Result};
use crate::integrators::Integrator;
use crate::qoi::Qoi;

const CHUNK: u64 = 256;

/// Largest tolerated fraction of failed samples.
pub const MAX_FAILURE_FRACTION: f64 = 1e-4;

/// Running sums for one level (or for a single-level estimator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: u32,
    /// Base step size of the finer path.
    pub h: f64,
    pub n: u64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub cost_steps: u64,
    pub failures: u64,
}

impl LevelStats {
    pub fn new(level: u32, h: f64, dim: usize) -> Self {
        Self {
            level,
            h,
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
            cost_steps: 0,
            failures: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    /// Samples attempted, including failures.
    pub fn attempted(&self) -> u64 {
        self.n + self.failures
    }

    #[inline]
    pub fn push(&mut self, y: &[f64], cost: u64) {
        for ((s, q), v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(y) {
            *s += v;
            *q += v * v;
        }
        self.n += 1;
        self.cost_steps += cost;
    }

    pub fn merge(&mut self, other: &LevelStats) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.n += other.n;
        self.cost_steps += other.cost_steps;
        self.failures += other.failures;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum[i] / self.n as f64
        }
    }

    /// Unbiased sample variance, zero below two samples.
    pub fn var(&self, i: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.sum_sq[i] - self.sum[i] * self.sum[i] / n) / (n - 1.0)).max(0.0)
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.mean(i)).collect()
    }

    pub fn vars(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.var(i)).collect()
    }

    pub fn max_var(&self) -> f64 {
        (0..self.dim()).map(|i| self.var(i)).fold(0.0, f64::max)
    }

    /// Component with the largest absolute mean.
    pub fn dominant_component(&self) -> usize {
        (0..self.dim())
            .max_by(|&a, &b| self.mean(a).abs().total_cmp(&self.mean(b).abs()))
            .unwrap_or(0)
    }

    /// Standard error of the mean of component `i`.
    pub fn std_error(&self, i: usize) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.var(i) / self.n as f64).sqrt()
        }
    }

    pub fn cost_per_sample(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.cost_steps as f64 / self.n as f64
        }
    }

    fn check_failures(&self) -> Result<()> {
        let total = self.attempted();
        if total > 0 && self.failures as f64 > MAX_FAILURE_FRACTION * total as f64 {
            return Err(Error::SampleFailures {
                failed: self.failures,
                total,
            });
        }
        Ok(())
    }
}

/// What one sample index produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// `P_level - P_{level-1}` (or `P_0`), streams keyed by the level.
    Level(u32),
    /// A single path with this many base steps, on the single-level streams.
    Single { steps: u64 },
}

/// Thread pool plus everything a sample needs.
pub struct Sampler<'a> {
    pub setup: &'a PathSetup,
    pub qoi: &'a Qoi,
    pub seed: u64,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Sampler<'a> {
    /// `workers == 0` uses the global rayon pool.
    pub fn new(setup: &'a PathSetup, qoi: &'a Qoi, seed: u64, workers: usize) -> Result<Self> {
        let pool = if workers == 0 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::InvalidParameter(format!("cannot start {workers} workers: {e}")))?,
            )
        };
        Ok(Self { setup, qoi, seed, pool })
    }

    fn chunk(&self, kind: SampleKind, start: u64, end: u64, stats: &mut LevelStats) {
        let dim = self.qoi.dim();
        let mut y = vec![0.0; dim];
        let mut scratch = vec![0.0; dim];
        let mut first = start;
        while first < end {
            let last = (first + LANES as u64).min(end);
            let code = match kind {
                SampleKind::Level(level) => level,
                SampleKind::Single { .. } => STMC_LEVEL,
            };
            let mut streams: Vec<NoiseStream> =
                (first..last).map(|i| NoiseStream::new(self.seed, code, i)).collect();
            let (level, steps) = match kind {
                SampleKind::Level(level) => (level, self.setup.steps(0)),
                SampleKind::Single { steps } => (0, steps),
            };
            if level == 0 {
                for r in simulate_paths(self.setup, steps, &mut streams) {
                    match r {
                        Ok((s, cost)) => {
                            self.qoi.evaluate_into(s.x, &mut y);
                            stats.push(&y, cost);
                        }
                        Err(_) => stats.failures += 1,
                    }
                }
            } else {
                for r in coupled_paths_many(self.setup, level, &mut streams) {
                    match r {
                        Ok(c) => {
                            self.qoi.evaluate_into(c.fine.x, &mut y);
                            self.qoi.evaluate_into(c.coarse.x, &mut scratch);
                            for (a, b) in y.iter_mut().zip(&scratch) {
                                *a -= b;
                            }
                            stats.push(&y, c.cost);
                        }
                        Err(_) => stats.failures += 1,
                    }
                }
            }
            first = last;
        }
    }

    /// Add `count` further samples to `stats`, continuing its index sequence.
    pub fn extend(&self, kind: SampleKind, stats: &mut LevelStats, count: u64) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let start = stats.attempted();
        let end = start + count;
        let chunks: Vec<(u64, u64)> = (start..end)
            .step_by(CHUNK as usize)
            .map(|a| (a, (a + CHUNK).min(end)))
            .collect();
        let template = LevelStats::new(stats.level, stats.h, stats.dim());
        let run = || {
            chunks
                .par_iter()
                .map(|&(a, b)| {
                    let mut part = template.clone();
                    self.chunk(kind, a, b, &mut part);
                    part
                })
                .collect::<Vec<_>>()
        };
        let parts = match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        };
        for part in &parts {
            stats.merge(part);
        }
        stats.check_failures()
    }

    pub fn level_stats(&self, level: u32, count: u64) -> Result<LevelStats> {
        let mut stats = LevelStats::new(level, self.setup.step_size(level), self.qoi.dim());
        self.extend(SampleKind::Level(level), &mut stats, count)?;
        Ok(stats)
    }
}

/// Bias model `E[P_l - P] ~ c1 h_l^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConstants {
    pub alpha: f64,
    pub c1: f64,
}

/// Least-squares line through `(ln x, ln y)`: returns `(slope, intercept)`.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Significance threshold, in standard errors, for a level mean to enter
/// the bias fit.
pub const BIAS_SIGNIFICANCE: f64 = 2.0;

/// Fit `|E[Y_l]| = c1 (2^alpha - 1) h_l^alpha` over the levels `l >= 1`.
/// Since `E[Y_l] = c1 (h_l^alpha - h_{l-1}^alpha)` and `h_{l-1} = 2 h_l`,
/// the intercept carries the factor `2^alpha - 1`, equivalently
/// `1 - 2^-alpha` relative to `h_{l-1}`.
pub fn estimate_bias_constants(stats: &[LevelStats]) -> Result<BiasConstants> {
    fit_bias(stats, &[])
}

/// [`estimate_bias_constants`] where the levels in `bounded` enter with the
/// upper bound `|mean| + 2 SE` instead of a significant mean.
fn fit_bias(stats: &[LevelStats], bounded: &[u32]) -> Result<BiasConstants> {
    let levels: Vec<&LevelStats> = stats.iter().filter(|s| s.level >= 1).collect();
    if levels.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "bias fit needs at least 3 levels >= 1, got {}",
            levels.len()
        )));
    }
    let component = levels[0].dominant_component();
    let mut m = Vec::with_capacity(levels.len());
    for s in &levels {
        let mean = s.mean(component);
        let se = s.std_error(component);
        if bounded.contains(&s.level) {
            m.push(mean.abs() + BIAS_SIGNIFICANCE * se);
        } else if mean.abs() > BIAS_SIGNIFICANCE * se {
            m.push(mean.abs());
        } else {
            return Err(Error::InsignificantBias {
                level: s.level as usize,
                mean,
                std_error: se,
            });
        }
    }
    let h: Vec<f64> = levels.iter().map(|s| s.h).collect();
    let (alpha, intercept) = fit_power_law(&h, &m);
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("fitted bias order {alpha} is not positive")));
    }
    Ok(BiasConstants {
        alpha,
        c1: intercept.exp() / (2f64.powf(alpha) - 1.0),
    })
}

/// Smallest `L` with `c1 h_L^alpha <= eps / sqrt(2)`.
pub fn choose_levels(bias: BiasConstants, eps: f64, m0: u64, t_final: f64, max_level: u32) -> Result<u32> {
    if !(bias.alpha > 0.0 && bias.c1 > 0.0 && eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "choose_levels needs alpha, c1, eps > 0, got {}, {}, {eps}",
            bias.alpha, bias.c1
        )));
    }
    let target = eps / std::f64::consts::SQRT_2;
    for level in 0..=max_level {
        let h = t_final / (m0 as f64 * 2f64.powi(level as i32));
        if bias.c1 * h.powf(bias.alpha) <= target {
            return Ok(level);
        }
    }
    let mut required = max_level as usize + 1;
    loop {
        let h = t_final / (m0 as f64 * 2f64.powi(required as i32));
        if bias.c1 * h.powf(bias.alpha) <= target || required > 64 {
            break;
        }
        required += 1;
    }
    Err(Error::LevelCap {
        required,
        max: max_level as usize,
    })
}

/// `N_l = ceil(2 eps^-2 sqrt(V_l h_l) sum_k sqrt(V_k / h_k))`, the allocation
/// minimising `sum N_l / h_l` subject to `sum V_l / N_l <= eps^2 / 2`.
pub fn allocate_samples(vars: &[f64], h: &[f64], eps: f64) -> Vec<u64> {
    let total: f64 = vars.iter().zip(h).map(|(v, h)| (v / h).sqrt()).sum();
    vars.iter()
        .zip(h)
        .map(|(v, h)| (2.0 / (eps * eps) * (v * h).sqrt() * total).ceil() as u64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Stmc,
    Mlmc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Stmc => "stmc",
            Method::Mlmc => "mlmc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "stmc" => Ok(Method::Stmc),
            "mlmc" => Ok(Method::Mlmc),
            other => Err(format!("unknown method '{other}' (expected stmc or mlmc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub integrator: Integrator,
    pub eps: Option<f64>,
    pub estimate: Vec<f64>,
    /// Standard error of each estimate component.
    pub stat_error: Vec<f64>,
    pub bias: Option<BiasConstants>,
    /// `c1 h^alpha` at the finest step, when the bias model is known.
    pub bias_estimate: Option<f64>,
    pub levels: Vec<LevelStats>,
    /// Optimal sample counts from the final variance estimates. Levels
    /// holding pilot samples may have more.
    pub allocated: Vec<u64>,
    /// Finest level (MLMC) or `0` (StMC).
    pub finest_level: u32,
    /// Base steps of the finest path.
    pub finest_steps: u64,
    pub total_cost_steps: u64,
    pub pilot_cost_steps: u64,
    pub wall_seconds: f64,
    pub seed: u64,
}

impl RunResult {
    /// Largest component standard error.
    pub fn max_stat_error(&self) -> f64 {
        self.stat_error.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Samples per level in the MLMC pilot phase.
    pub pilot_samples: u64,
    /// Finest level of the pilot phase.
    pub pilot_max_level: u32,
    /// Cap on pilot samples per level when refining an insignificant mean.
    pub max_pilot_samples: u64,
    /// Samples on levels without data (and the StMC variance pilot).
    pub initial_samples: u64,
    pub max_level: u32,
    /// Known bias model; skips the fitting pilot.
    pub bias: Option<BiasConstants>,
    pub max_iterations: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 0,
            pilot_samples: 10_000,
            pilot_max_level: 4,
            max_pilot_samples: 160_000,
            initial_samples: 1_000,
            max_level: 16,
            bias: None,
            max_iterations: 20,
        }
    }
}

/// Stopping rule for single-level runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StmcTarget {
    Tolerance(f64),
    Samples(u64),
}

/// Standard Monte Carlo with `steps` base steps per path.
pub fn run_stmc(
    setup: &PathSetup,
    qoi: &Qoi,
    steps: u64,
    target: StmcTarget,
    opts: &RunOptions,
) -> Result<RunResult> {
    let start = Instant::now();
    setup.validate()?;
    if steps == 0 {
        return Err(Error::InvalidParameter("StMC needs at least one step".into()));
    }
    let probe = PathSetup {
        m0: steps,
        ..*setup
    };
    probe.check_stability(probe.step_size(0))?;
    let sampler = Sampler::new(setup, qoi, opts.seed, opts.workers)?;
    let kind = SampleKind::Single { steps };
    let h = setup.t_final / steps as f64;
    let mut stats = LevelStats::new(0, h, qoi.dim());
    let eps = match target {
        StmcTarget::Samples(n) => {
            sampler.extend(kind, &mut stats, n)?;
            None
        }
        StmcTarget::Tolerance(eps) => {
            if !(eps > 0.0) {
                return Err(Error::InvalidParameter(format!("eps must be > 0, got {eps}")));
            }
            sampler.extend(kind, &mut stats, opts.initial_samples.max(2))?;
            for _ in 0..opts.max_iterations {
                let needed = (2.0 * stats.max_var() / (eps * eps)).ceil() as u64;
                if needed <= stats.n {
                    break;
                }
                let more = needed - stats.n;
                sampler.extend(kind, &mut stats, more)?;
            }
            Some(eps)
        }
    };
    let bias_estimate = opts.bias.map(|b| b.c1 * h.powf(b.alpha));
    Ok(RunResult {
        method: Method::Stmc,
        integrator: setup.integrator,
        eps,
        estimate: stats.means(),
        stat_error: (0..stats.dim()).map(|i| stats.std_error(i)).collect(),
        bias: opts.bias,
        bias_estimate,
        finest_level: 0,
        finest_steps: steps,
        total_cost_steps: stats.cost_steps,
        pilot_cost_steps: 0,
        allocated: vec![stats.n],
        levels: vec![stats],
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: opts.seed,
    })
}

/// Pilot phase: samples on levels `0..=max_level` and the fitted bias model.
/// Levels whose mean is not resolved get more samples, up to `max_samples`;
/// a level still unresolved there enters the fit with the upper bound
/// `|mean| + 2 SE`, which can only overstate the bias.
pub fn bias_pilot(
    sampler: &Sampler,
    max_level: u32,
    samples: u64,
    max_samples: u64,
) -> Result<(Vec<LevelStats>, BiasConstants)> {
    let mut stats = Vec::new();
    for level in 0..=max_level {
        stats.push(sampler.level_stats(level, samples)?);
    }
    let mut bounded = Vec::new();
    loop {
        match fit_bias(&stats, &bounded) {
            Ok(bias) => return Ok((stats, bias)),
            Err(Error::InsignificantBias { level, mean, std_error }) => {
                let s = &mut stats[level];
                if s.n >= max_samples {
                    warn!("level {level} mean {mean:.3e} +/- {std_error:.3e} unresolved; fitting its upper bound");
                    bounded.push(level as u32);
                    continue;
                }
                let more = (3 * s.n).min(max_samples - s.n);
                info!("refining pilot level {level}: mean {mean:.3e} +/- {std_error:.3e}, adding {more} samples");
                sampler.extend(SampleKind::Level(level as u32), s, more)?;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Multilevel Monte Carlo to root-mean-square tolerance `eps`.
pub fn run_mlmc(setup: &PathSetup, qoi: &Qoi, eps: f64, opts: &RunOptions) -> Result<RunResult> {
    let start = Instant::now();
    setup.validate()?;
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be > 0, got {eps}")));
    }
    let sampler = Sampler::new(setup, qoi, opts.seed, opts.workers)?;
    let (mut stats, bias) = match opts.bias {
        Some(b) => (Vec::new(), b),
        None => bias_pilot(&sampler, opts.pilot_max_level, opts.pilot_samples, opts.max_pilot_samples)?,
    };
    let pilot_cost_steps: u64 = stats.iter().map(|s| s.cost_steps).sum();
    if stats.len() >= 2 && stats[1].max_var() >= 0.5 * stats[0].max_var() {
        warn!(
            "Var[Y_1] = {:.3e} is not below half of Var[Y_0] = {:.3e}; consider a larger M_0",
            stats[1].max_var(),
            stats[0].max_var()
        );
    }
    let finest = choose_levels(bias, eps, setup.m0, setup.t_final, opts.max_level)?;
    stats.truncate(finest as usize + 1);
    while stats.len() <= finest as usize {
        let level = stats.len() as u32;
        stats.push(sampler.level_stats(level, opts.initial_samples.max(2))?);
    }
    let h: Vec<f64> = stats.iter().map(|s| s.h).collect();
    for _ in 0..opts.max_iterations {
        let vars: Vec<f64> = stats.iter().map(LevelStats::max_var).collect();
        let achieved: f64 = vars.iter().zip(&stats).map(|(v, s)| v / s.n as f64).sum();
        if achieved <= 0.5 * eps * eps {
            break;
        }
        let target = allocate_samples(&vars, &h, eps);
        for (s, &n) in stats.iter_mut().zip(&target) {
            if n > s.n {
                let more = n - s.n;
                sampler.extend(SampleKind::Level(s.level), s, more)?;
            }
        }
    }
    let vars: Vec<f64> = stats.iter().map(LevelStats::max_var).collect();
    let allocated = allocate_samples(&vars, &h, eps);
    let dim = qoi.dim();
    let estimate = (0..dim).map(|i| stats.iter().map(|s| s.mean(i)).sum()).collect();
    let stat_error = (0..dim)
        .map(|i| stats.iter().map(|s| s.var(i) / s.n as f64).sum::<f64>().sqrt())
        .collect();
    let h_l = setup.step_size(finest);
    let total_cost_steps = stats.iter().map(|s| s.cost_steps).sum::<u64>();
    Ok(RunResult {
        method: Method::Mlmc,
        integrator: setup.integrator,
        eps: Some(eps),
        estimate,
        stat_error,
        bias: Some(bias),
        bias_estimate: Some(bias.c1 * h_l.powf(bias.alpha)),
        finest_level: finest,
        finest_steps: setup.steps(finest),
        total_cost_steps,
        pilot_cost_steps,
        levels: stats,
        allocated,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: opts.seed,
    })
}

/// One row of a variance- or bias-decay table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub level: u32,
    pub h: f64,
    pub var_y: f64,
    pub mean_y: f64,
    pub n_samples: u64,
    pub cost_steps: u64,
}

impl DecayRow {
    /// Largest variance and largest-magnitude mean over the components.
    pub fn from_stats(s: &LevelStats) -> Self {
        Self {
            level: s.level,
            h: s.h,
            var_y: s.max_var(),
            mean_y: s.mean(s.dominant_component()),
            n_samples: s.n,
            cost_steps: s.cost_steps,
        }
    }
}

/// `samples` coupled samples on each of `levels`.
pub fn decay_sweep(
    setup: &PathSetup,
    qoi: &Qoi,
    levels: std::ops::RangeInclusive<u32>,
    samples: u64,
    opts: &RunOptions,
) -> Result<Vec<LevelStats>> {
    setup.validate()?;
    let sampler = Sampler::new(setup, qoi, opts.seed, opts.workers)?;
    levels.map(|l| sampler.level_stats(l, samples)).collect()
}

/// Fitted log-log slope of `Var[Y_l]` against `h_l` over `rows`.
pub fn variance_slope(rows: &[DecayRow]) -> f64 {
    let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let v: Vec<f64> = rows.iter().map(|r| r.var_y).collect();
    fit_power_law(&h, &v).0
}

/// Fitted log-log slope of `|E[Y_l]|` against `h_l` over `rows`.
pub fn bias_slope(rows: &[DecayRow]) -> f64 {
    let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.mean_y.abs()).collect();
    fit_power_law(&h, &m).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub eps: f64,
    pub method: Method,
    pub integrator: Integrator,
    pub cost_steps: u64,
    pub wall_seconds: f64,
    pub estimate: f64,
    pub stat_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSweep {
    pub bias: BiasConstants,
    /// Cost of the shared pilot used to fit `bias`.
    pub pilot_cost_steps: u64,
    pub rows: Vec<CostRow>,
}

/// Steps for a single-level run whose bias `c1 h^alpha` is `eps / sqrt(2)`.
pub fn stmc_steps_for(bias: BiasConstants, eps: f64, t_final: f64) -> u64 {
    let h = (eps / (std::f64::consts::SQRT_2 * bias.c1)).powf(1.0 / bias.alpha);
    (t_final / h).ceil().max(1.0) as u64
}

/// `opts.bias` when given, otherwise a pilot fit on streams independent of
/// the estimation runs. Returns the model and the pilot cost in steps.
pub fn bias_model(setup: &PathSetup, qoi: &Qoi, opts: &RunOptions) -> Result<(BiasConstants, u64)> {
    if let Some(b) = opts.bias {
        return Ok((b, 0));
    }
    let sampler = Sampler::new(setup, qoi, opts.seed ^ 0x9e37_79b9_7f4a_7c15, opts.workers)?;
    let (stats, b) = bias_pilot(&sampler, opts.pilot_max_level, opts.pilot_samples, opts.max_pilot_samples)?;
    Ok((b, stats.iter().map(|s| s.cost_steps).sum()))
}

/// Cost against tolerance for the requested methods, sharing one bias model.
pub fn cost_sweep(
    setup: &PathSetup,
    qoi: &Qoi,
    eps_list: &[f64],
    methods: &[Method],
    opts: &RunOptions,
) -> Result<CostSweep> {
    setup.validate()?;
    let (bias, pilot_cost_steps) = bias_model(setup, qoi, opts)?;
    let run_opts = RunOptions {
        bias: Some(bias),
        ..opts.clone()
    };
    let mut rows = Vec::new();
    for &eps in eps_list {
        for &method in methods {
            let r = match method {
                Method::Mlmc => run_mlmc(setup, qoi, eps, &run_opts)?,
                Method::Stmc => {
                    let steps = stmc_steps_for(bias, eps, setup.t_final);
                    setup.check_stability(setup.t_final / steps as f64)?;
                    run_stmc(setup, qoi, steps, StmcTarget::Tolerance(eps), &run_opts)?
                }
            };
            let c = r.levels[0].dominant_component();
            rows.push(CostRow {
                eps,
                method,
                integrator: setup.integrator,
                cost_steps: r.total_cost_steps,
                wall_seconds: r.wall_seconds,
                estimate: r.estimate[c],
                stat_error: r.stat_error[c],
            });
        }
    }
    Ok(CostSweep {
        bias,
        pilot_cost_steps,
        rows,
    })
}

/// Fitted log-log slope of cost against `eps` for one method.
pub fn cost_slope(rows: &[CostRow], method: Method) -> f64 {
    let sel: Vec<&CostRow> = rows.iter().filter(|r| r.method == method).collect();
    let e: Vec<f64> = sel.iter().map(|r| r.eps).collect();
    let c: Vec<f64> = sel.iter().map(|r| r.cost_steps as f64).collect();
    fit_power_law(&e, &c).0
}
