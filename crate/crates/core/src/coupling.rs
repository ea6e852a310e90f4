//! Reproducible noise streams and the fine/coarse path coupling used by the
//! multilevel estimator.
//!
//! The coarse path is driven by the same Brownian motion as the fine path.
//! Near a reflecting wall this only holds in the boundary-free extended
//! frame, so fine draws are mapped to that frame with the fine parity, and
//! the combined draw is mapped back with the coarse parity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{ou_noise_scale, step_with, Integrator, ParticleState, Sign};
use crate::model::ModelParams;
use crate::qoi::Qoi;
#[cfg(test)]
use crate::qoi::QoISpec;

/// Level code reserved for single-level (standard Monte Carlo) streams.
pub const STMC_LEVEL: u32 = u32::MAX;

/// Counter-based Gaussian stream keyed by `(seed, level, sample_index)`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    level: u32,
    sample_index: u64,
    cursor: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, level: u32, sample_index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..12].copy_from_slice(&level.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(sample_index);
        Self {
            seed,
            level,
            sample_index,
            cursor: 0,
            rng,
        }
    }

    #[inline]
    pub fn draw_normal(&mut self) -> f64 {
        self.cursor += 1;
        StandardNormal.sample(&mut self.rng)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    /// Number of draws taken so far.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }
}

/// Coarse SE draw `S_c (S_n xi_n + S_n1 xi_n1) / sqrt(2)` from two fine draws.
#[inline]
pub fn coarse_noise_se(xi_n: f64, xi_n1: f64, s_n: Sign, s_n1: Sign, s_c: Sign) -> f64 {
    s_c * ((s_n * xi_n + s_n1 * xi_n1) * std::f64::consts::FRAC_1_SQRT_2)
}

/// Coarse OU draw `S_c (e^{-lambda h} S_n xi_n + S_n1 xi_n1) / sqrt(e^{-2 lambda h} + 1)`.
#[inline]
pub fn coarse_noise_gl(
    xi_n: f64,
    xi_n1: f64,
    lambda: f64,
    h: f64,
    s_n: Sign,
    s_n1: Sign,
    s_c: Sign,
) -> f64 {
    let d = (-lambda * h).exp();
    s_c * ((d * (s_n * xi_n) + s_n1 * xi_n1) / (d * d + 1.0).sqrt())
}

/// Step size `min(h, lambda(x_adapt) / lambda(x) h)`.
pub fn adaptive_step_size(x: f64, h: f64, x_adapt: f64, p: &ModelParams) -> f64 {
    let ratio = p.coefficients(x_adapt).lambda / p.coefficients(x).lambda;
    h * ratio.min(1.0)
}

/// Everything needed to simulate one path or one coupled pair, apart from
/// the noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSetup {
    pub integrator: Integrator,
    pub params: ModelParams,
    pub x0: f64,
    pub u0: f64,
    pub t_final: f64,
    /// Steps on level 0.
    pub m0: u64,
    /// Reference height of the adaptive step rule; `None` for uniform steps.
    pub x_adapt: Option<f64>,
    /// Apply the reflection parities when coupling noise.
    pub coupling_signs: bool,
    /// Test hook: when false every draw is replaced by zero.
    pub noise: bool,
}

impl Default for PathSetup {
    fn default() -> Self {
        Self {
            integrator: Integrator::SymplecticEuler,
            params: ModelParams::default(),
            x0: 0.05,
            u0: 0.1,
            t_final: 1.0,
            m0: 40,
            x_adapt: None,
            coupling_signs: true,
            noise: true,
        }
    }
}

impl PathSetup {
    /// Base step size on `level`.
    pub fn step_size(&self, level: u32) -> f64 {
        self.t_final / self.steps(level) as f64
    }

    /// Uniform step count `M_0 2^level`.
    pub fn steps(&self, level: u32) -> u64 {
        self.m0 << level
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::InvalidParameter(format!("T must be > 0, got {}", self.t_final)));
        }
        if self.m0 == 0 {
            return Err(Error::InvalidParameter("M_0 must be >= 1".into()));
        }
        if !(self.x0.is_finite() && (0.0..=self.params.height).contains(&self.x0)) {
            return Err(Error::Domain {
                x: self.x0,
                height: self.params.height,
            });
        }
        if !self.u0.is_finite() {
            return Err(Error::InvalidParameter(format!("U_0 must be finite, got {}", self.u0)));
        }
        if let Some(xa) = self.x_adapt {
            if !(xa.is_finite() && (0.0..=self.params.height).contains(&xa)) {
                return Err(Error::InvalidParameter(format!("x_adapt must lie in [0, H], got {xa}")));
            }
            if self.integrator == Integrator::Baoab {
                return Err(Error::InvalidParameter(
                    "adaptive timestepping is available for se and gl only".into(),
                ));
            }
        }
        self.check_stability(self.step_size(0))
    }

    /// SE stability check for a base step `h`.
    pub fn check_stability(&self, h: f64) -> Result<()> {
        if self.integrator != Integrator::SymplecticEuler {
            return Ok(());
        }
        let lambda = match self.x_adapt {
            Some(xa) => self.params.coefficients(xa).lambda,
            None => self.params.lambda_max(),
        };
        if h * lambda >= 2.0 {
            return Err(Error::Unstable(format!(
                "symplectic Euler needs h < {:.6}, got h = {h}",
                2.0 / lambda
            )));
        }
        Ok(())
    }

    fn initial_state(&self) -> ParticleState {
        ParticleState::new(self.x0, self.u0)
    }

    fn next_step(&self, x: f64, h: f64) -> f64 {
        match self.x_adapt {
            Some(xa) => adaptive_step_size(x, h, xa, &self.params),
            None => h,
        }
    }
}

/// Terminal states of a coupled fine/coarse pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledPath {
    pub fine: ParticleState,
    pub coarse: ParticleState,
    /// Fine plus coarse integrator steps.
    pub cost: u64,
}

/// Independent samples advanced together. Interleaving several paths lets
/// the processor overlap their otherwise serial step chains; each lane
/// performs exactly the arithmetic of a lone path.
pub const LANES: usize = 4;

/// Simulate one path with base step `t_final / steps`. Returns the terminal
/// state and the number of steps taken.
pub fn simulate_path(
    setup: &PathSetup,
    steps: u64,
    stream: &mut NoiseStream,
) -> Result<(ParticleState, u64)> {
    simulate_paths(setup, steps, std::slice::from_mut(stream)).pop().unwrap()
}

/// [`simulate_path`] for one sample per stream.
pub fn simulate_paths(
    setup: &PathSetup,
    steps: u64,
    streams: &mut [NoiseStream],
) -> Vec<Result<(ParticleState, u64)>> {
    if setup.x_adapt.is_some() {
        return streams
            .iter_mut()
            .map(|stream| simulate_adaptive(setup, steps, stream))
            .collect();
    }
    let h = setup.t_final / steps as f64;
    let p = &setup.params;
    let mut lanes: Vec<(ParticleState, Option<Error>)> =
        streams.iter().map(|_| (setup.initial_state(), None)).collect();
    for _ in 0..steps {
        for ((s, failed), stream) in lanes.iter_mut().zip(streams.iter_mut()) {
            if failed.is_some() {
                continue;
            }
            match step_with(setup.integrator, s, h, p, |_| draw(setup, stream)) {
                Ok(r) => *s = r.state,
                Err(e) => *failed = Some(e),
            }
        }
    }
    lanes
        .into_iter()
        .map(|(mut s, failed)| match failed {
            Some(e) => Err(e),
            None => {
                s.t = setup.t_final;
                Ok((s, steps))
            }
        })
        .collect()
}

#[inline]
fn draw(setup: &PathSetup, stream: &mut NoiseStream) -> f64 {
    if setup.noise {
        stream.draw_normal()
    } else {
        0.0
    }
}

fn simulate_adaptive(
    setup: &PathSetup,
    steps: u64,
    stream: &mut NoiseStream,
) -> Result<(ParticleState, u64)> {
    let h = setup.t_final / steps as f64;
    let p = &setup.params;
    let mut s = setup.initial_state();
    let t_final = setup.t_final;
    let snap = 1e-12 * t_final;
    let mut taken = 0;
    while s.t < t_final {
        let mut dt = setup.next_step(s.x, h);
        if s.t + dt >= t_final - snap {
            dt = t_final - s.t;
        }
        s = step_with(setup.integrator, &s, dt, p, |_| draw(setup, stream))?.state;
        taken += 1;
        if t_final - s.t <= snap {
            s.t = t_final;
        }
    }
    Ok((s, taken))
}

/// Coupled fine (level `level`) and coarse (level `level - 1`) paths.
pub fn coupled_paths(setup: &PathSetup, level: u32, stream: &mut NoiseStream) -> Result<CoupledPath> {
    coupled_paths_many(setup, level, std::slice::from_mut(stream)).pop().unwrap()
}

/// [`coupled_paths`] for one sample per stream.
pub fn coupled_paths_many(
    setup: &PathSetup,
    level: u32,
    streams: &mut [NoiseStream],
) -> Vec<Result<CoupledPath>> {
    if level == 0 {
        return streams
            .iter()
            .map(|_| Err(Error::InvalidParameter("coupled paths need level >= 1".into())))
            .collect();
    }
    match setup.x_adapt {
        None => coupled_uniform(setup, level, streams),
        Some(_) => streams
            .iter_mut()
            .map(|stream| coupled_adaptive(setup, level, stream))
            .collect(),
    }
}

/// Two fine steps of size `h` and the coupled coarse step of size `2h`.
#[inline]
fn coupled_window(
    setup: &PathSetup,
    h: f64,
    fine: &mut ParticleState,
    coarse: &mut ParticleState,
    stream: &mut NoiseStream,
) -> Result<()> {
    let p = &setup.params;
    let integrator = setup.integrator;
    let signs = setup.coupling_signs;
    let sign = |s: Sign| if signs { s } else { Sign::Plus };
    let lambda = p.coefficients(fine.x).lambda;
    let mut xi = [0.0; 2];
    let mut par = [Sign::Plus; 2];
    for k in 0..2 {
        let r = step_with(integrator, fine, h, p, |_| draw(setup, stream))?;
        xi[k] = r.noise;
        par[k] = sign(r.noise_parity);
        *fine = r.state;
    }
    *coarse = step_with(integrator, coarse, 2.0 * h, p, |pc| match integrator {
        Integrator::SymplecticEuler => coarse_noise_se(xi[0], xi[1], par[0], par[1], sign(pc)),
        _ => coarse_noise_gl(xi[0], xi[1], lambda, h, par[0], par[1], sign(pc)),
    })?
    .state;
    Ok(())
}

fn coupled_uniform(setup: &PathSetup, level: u32, streams: &mut [NoiseStream]) -> Vec<Result<CoupledPath>> {
    let h = setup.step_size(level);
    let coarse_steps = setup.steps(level - 1);
    let start = setup.initial_state();
    let mut lanes: Vec<(ParticleState, ParticleState, Option<Error>)> =
        streams.iter().map(|_| (start, start, None)).collect();
    for _ in 0..coarse_steps {
        for ((fine, coarse, failed), stream) in lanes.iter_mut().zip(streams.iter_mut()) {
            if failed.is_some() {
                continue;
            }
            if let Err(e) = coupled_window(setup, h, fine, coarse, stream) {
                *failed = Some(e);
            }
        }
    }
    lanes
        .into_iter()
        .map(|(mut fine, mut coarse, failed)| match failed {
            Some(e) => Err(e),
            None => {
                fine.t = setup.t_final;
                coarse.t = setup.t_final;
                Ok(CoupledPath {
                    fine,
                    coarse,
                    cost: 3 * coarse_steps,
                })
            }
        })
        .collect()
}

/// Running noise integral over the sub-intervals of one (fine or coarse)
/// step in the merged timeline. SE accumulates Brownian increments; GL
/// accumulates the OU-weighted integral with the step's own `lambda`.
#[derive(Debug, Clone, Copy)]
struct StepNoise {
    ou: bool,
    lambda: f64,
    acc: f64,
}

impl StepNoise {
    fn new(ou: bool, lambda: f64) -> Self {
        Self { ou, lambda, acc: 0.0 }
    }

    #[inline]
    fn push(&mut self, xi: f64, dtau: f64) {
        if self.ou {
            self.acc = self.acc * (-self.lambda * dtau).exp() + xi * ou_noise_scale(self.lambda, dtau);
        } else {
            self.acc += xi * dtau.sqrt();
        }
    }

    /// Equivalent standard normal for a completed step of length `h`.
    fn normalised(&self, h: f64) -> f64 {
        if self.ou {
            self.acc / ou_noise_scale(self.lambda, h)
        } else {
            self.acc / h.sqrt()
        }
    }
}

struct AdaptivePath {
    state: ParticleState,
    step_end: f64,
    h: f64,
    noise: StepNoise,
    steps: u64,
}

impl AdaptivePath {
    fn begin(state: ParticleState, base: f64, setup: &PathSetup, ou: bool) -> Self {
        let mut path = Self {
            state,
            step_end: 0.0,
            h: 0.0,
            noise: StepNoise::new(ou, 0.0),
            steps: 0,
        };
        path.schedule(base, setup);
        path
    }

    fn schedule(&mut self, base: f64, setup: &PathSetup) {
        let t_final = setup.t_final;
        let t = self.state.t;
        let mut end = t + setup.next_step(self.state.x, base);
        if end >= t_final - 1e-12 * t_final {
            end = t_final;
        }
        self.step_end = end;
        self.h = end - t;
        self.noise = StepNoise::new(self.noise.ou, setup.params.coefficients(self.state.x).lambda);
    }

    fn done(&self, t_final: f64) -> bool {
        self.state.t >= t_final
    }
}

fn coupled_adaptive(setup: &PathSetup, level: u32, stream: &mut NoiseStream) -> Result<CoupledPath> {
    let p = &setup.params;
    let integrator = setup.integrator;
    let ou = match integrator {
        Integrator::SymplecticEuler => false,
        Integrator::GeometricLangevin => true,
        Integrator::Baoab => {
            return Err(Error::InvalidParameter(
                "adaptive timestepping is available for se and gl only".into(),
            ))
        }
    };
    let t_final = setup.t_final;
    let snap = 1e-12 * t_final;
    let h_fine = setup.step_size(level);
    let h_coarse = 2.0 * h_fine;
    let start = setup.initial_state();
    let mut fine = AdaptivePath::begin(start, h_fine, setup, ou);
    let mut coarse = AdaptivePath::begin(start, h_coarse, setup, ou);
    let mut tau = 0.0;
    while !(fine.done(t_final) && coarse.done(t_final)) {
        if (fine.step_end - coarse.step_end).abs() <= snap {
            coarse.step_end = fine.step_end;
            coarse.h = coarse.step_end - coarse.state.t;
        }
        let next = fine.step_end.min(coarse.step_end);
        let dtau = next - tau;
        if dtau <= 0.0 {
            return Err(Error::Timeline(format!("non-increasing time point {next} after {tau}")));
        }
        let xi = if setup.noise { stream.draw_normal() } else { 0.0 };
        let fine_sign = if setup.coupling_signs { fine.state.parity } else { Sign::Plus };
        fine.noise.push(xi, dtau);
        coarse.noise.push(fine_sign * xi, dtau);
        tau = next;

        if fine.step_end == next {
            let xi_eff = fine.noise.normalised(fine.h);
            fine.state = step_with(integrator, &fine.state, fine.h, p, |_| xi_eff)?.state;
            fine.state.t = next;
            fine.steps += 1;
            if !fine.done(t_final) {
                fine.schedule(h_fine, setup);
            }
        }
        if coarse.step_end == next {
            let xi_eff = coarse.noise.normalised(coarse.h);
            let signs = setup.coupling_signs;
            coarse.state = step_with(integrator, &coarse.state, coarse.h, p, |pc| {
                if signs {
                    pc * xi_eff
                } else {
                    xi_eff
                }
            })?
            .state;
            coarse.state.t = next;
            coarse.steps += 1;
            if !coarse.done(t_final) {
                coarse.schedule(h_coarse, setup);
            }
        }
    }
    Ok(CoupledPath {
        fine: fine.state,
        coarse: coarse.state,
        cost: fine.steps + coarse.steps,
    })
}

/// One multilevel sample: writes `P_level - P_{level-1}` (or `P_0` on level
/// 0) into `out` and returns the integrator step count.
pub fn level_difference_sample(
    setup: &PathSetup,
    level: u32,
    stream: &mut NoiseStream,
    qoi: &Qoi,
    out: &mut [f64],
    scratch: &mut [f64],
) -> Result<u64> {
    if level == 0 {
        let (s, cost) = simulate_path(setup, setup.steps(0), stream)?;
        qoi.evaluate_into(s.x, out);
        return Ok(cost);
    }
    let c = coupled_paths(setup, level, stream)?;
    qoi.evaluate_into(c.fine.x, out);
    qoi.evaluate_into(c.coarse.x, scratch);
    for (y, pc) in out.iter_mut().zip(scratch.iter()) {
        *y -= pc;
    }
    Ok(c.cost)
}

/// Which path(s) a merged time point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Fine,
    Coarse,
    Both,
}

/// Sorted union of fine and coarse time points.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub points: Vec<f64>,
    pub origin: Vec<Origin>,
}

impl Timeline {
    /// Number of sub-intervals.
    pub fn intervals(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    /// Index of the time point `t`, if present.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.points.last().copied().unwrap_or(1.0).abs().max(1.0);
        self.points.iter().position(|&s| (s - t).abs() <= tol)
    }
}

fn check_times(name: &str, times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::Timeline(format!("{name} times need at least two points")));
    }
    if times[0] != 0.0 {
        return Err(Error::Timeline(format!("{name} times must start at 0")));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Timeline(format!("{name} times are not strictly increasing")));
    }
    Ok(())
}

/// Merge fine and coarse time grids; points closer than `1e-12 T` are
/// identified.
pub fn merged_timeline(fine: &[f64], coarse: &[f64]) -> Result<Timeline> {
    check_times("fine", fine)?;
    check_times("coarse", coarse)?;
    let t_final = *fine.last().unwrap();
    let tol = 1e-12 * t_final.abs().max(f64::MIN_POSITIVE);
    if (coarse.last().unwrap() - t_final).abs() > tol {
        return Err(Error::Timeline(format!(
            "end points differ: fine {t_final}, coarse {}",
            coarse.last().unwrap()
        )));
    }
    let (mut i, mut j) = (0, 0);
    let mut points = Vec::with_capacity(fine.len() + coarse.len());
    let mut origin = Vec::with_capacity(fine.len() + coarse.len());
    while i < fine.len() || j < coarse.len() {
        let f = fine.get(i).copied().unwrap_or(f64::INFINITY);
        let c = coarse.get(j).copied().unwrap_or(f64::INFINITY);
        if (f - c).abs() <= tol {
            points.push(f);
            origin.push(Origin::Both);
            i += 1;
            j += 1;
        } else if f < c {
            points.push(f);
            origin.push(Origin::Fine);
            i += 1;
        } else {
            points.push(c);
            origin.push(Origin::Coarse);
            j += 1;
        }
    }
    Ok(Timeline { points, origin })
}

fn interval_range(interval: (f64, f64), timeline: &Timeline) -> Result<std::ops::Range<usize>> {
    let a = timeline
        .index_of(interval.0)
        .ok_or_else(|| Error::Timeline(format!("{} is not a timeline point", interval.0)))?;
    let b = timeline
        .index_of(interval.1)
        .ok_or_else(|| Error::Timeline(format!("{} is not a timeline point", interval.1)))?;
    if b <= a {
        return Err(Error::Timeline(format!("empty interval [{}, {}]", interval.0, interval.1)));
    }
    Ok(a..b)
}

/// Brownian increment over `interval` assembled from one draw per merged
/// sub-interval. The coarse path sees the fine parities and its own parity;
/// the fine path uses the draws as they are.
pub fn adaptive_increment_se(
    interval: (f64, f64),
    timeline: &Timeline,
    xis: &[f64],
    fine_signs: &[Sign],
    coarse_sign: Sign,
    is_coarse: bool,
) -> Result<f64> {
    let range = interval_range(interval, timeline)?;
    let mut sum = 0.0;
    for j in range {
        let dtau = timeline.points[j + 1] - timeline.points[j];
        let xi = if is_coarse { fine_signs[j] * xis[j] } else { xis[j] };
        sum += xi * dtau.sqrt();
    }
    Ok(if is_coarse { coarse_sign * sum } else { sum })
}

/// OU-weighted noise integral over `interval`: draw `j` is scaled by the
/// exact OU standard deviation of its sub-interval and damped by
/// `exp(-sum_{k>j} lambda_k dtau_k)`, with `lambda_j = lambda(positions[j])`.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_increment_gl(
    interval: (f64, f64),
    timeline: &Timeline,
    xis: &[f64],
    positions: &[f64],
    fine_signs: &[Sign],
    coarse_sign: Sign,
    is_coarse: bool,
    p: &ModelParams,
) -> Result<f64> {
    let range = interval_range(interval, timeline)?;
    let mut sum = 0.0;
    let mut damping = 0.0f64;
    for j in range.rev() {
        let dtau = timeline.points[j + 1] - timeline.points[j];
        let lambda = p.coefficients(positions[j]).lambda;
        let xi = if is_coarse { fine_signs[j] * xis[j] } else { xis[j] };
        sum += (-damping).exp() * ou_noise_scale(lambda, dtau) * xi;
        damping += lambda * dtau;
    }
    Ok(if is_coarse { coarse_sign * sum } else { sum })
}
