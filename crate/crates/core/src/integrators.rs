//! One-step maps for Symplectic Euler (SE), Geometric Langevin (GL, an OBA
//! splitting) and BAOAB, with elastic reflection at `X = 0` and `X = H`.
//!
//! Every step takes its Gaussian draw through a closure that receives the
//! reflection parity in force at the moment the noise enters the velocity
//! update. SE and GL consume noise at the start of the step; BAOAB consumes
//! it after the first position half-step, which may already have reflected.
//! The multilevel coupling needs exactly that parity to map fine-path draws
//! into the boundary-free frame.

use std::fmt;
use std::ops::Mul;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coefficients, ModelParams};

pub mod extended;

/// Timestepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Integrator {
    #[serde(rename = "se")]
    SymplecticEuler,
    #[serde(rename = "gl")]
    GeometricLangevin,
    #[serde(rename = "baoab")]
    Baoab,
}

impl Integrator {
    pub const ALL: [Integrator; 3] = [
        Integrator::SymplecticEuler,
        Integrator::GeometricLangevin,
        Integrator::Baoab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Integrator::SymplecticEuler => "se",
            Integrator::GeometricLangevin => "gl",
            Integrator::Baoab => "baoab",
        }
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Integrator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "se" | "symplectic-euler" => Ok(Integrator::SymplecticEuler),
            "gl" | "geometric-langevin" => Ok(Integrator::GeometricLangevin),
            "baoab" => Ok(Integrator::Baoab),
            other => Err(format!("unknown integrator '{other}' (expected se, gl or baoab)")),
        }
    }
}

/// Reflection parity `(-1)^n_refl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Sign {
    #[default]
    Plus,
    Minus,
}

impl Sign {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    #[inline]
    pub fn flipped(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn of_count(n: u32) -> Sign {
        if n % 2 == 0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }
}

impl Mul for Sign {
    type Output = Sign;

    fn mul(self, rhs: Sign) -> Sign {
        if self == rhs {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }
}

impl Mul<f64> for Sign {
    type Output = f64;

    #[inline]
    fn mul(self, rhs: f64) -> f64 {
        match self {
            Sign::Plus => rhs,
            Sign::Minus => -rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub x: f64,
    pub u: f64,
    pub t: f64,
    pub parity: Sign,
    pub n_refl: u32,
}

impl ParticleState {
    pub fn new(x: f64, u: f64) -> Self {
        Self {
            x,
            u,
            t: 0.0,
            parity: Sign::Plus,
            n_refl: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub state: ParticleState,
    pub reflections: u32,
    /// The standard normal draw used in the velocity update.
    pub noise: f64,
    /// Parity in force when `noise` was applied.
    pub noise_parity: Sign,
    /// Set when an SE step violates `|1 - lambda h| < 1`.
    pub stability_warning: bool,
}

/// Result of folding a raw position back into `[0, H]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reflected {
    pub x: f64,
    pub u: f64,
    pub parity: Sign,
    pub n_refl: u32,
    pub count: u32,
}

/// Elastic reflection: `x -> -x` below the ground, `x -> 2H - x` above the
/// top, flipping `u` and the parity each time, until `x` lies in `[0, H]`.
#[inline]
pub fn reflect(x: f64, u: f64, height: f64, parity: Sign, n_refl: u32) -> Result<Reflected> {
    if x >= 0.0 && x <= height && u.is_finite() {
        return Ok(Reflected {
            x,
            u,
            parity,
            n_refl,
            count: 0,
        });
    }
    reflect_slow(x, u, height, parity, n_refl)
}

#[inline(never)]
fn reflect_slow(x: f64, u: f64, height: f64, parity: Sign, n_refl: u32) -> Result<Reflected> {
    if !(x.abs() <= 10.0 * height) || !u.is_finite() {
        return Err(runaway(x, u, height));
    }
    let mut out = Reflected {
        x,
        u,
        parity,
        n_refl,
        count: 0,
    };
    loop {
        if out.x < 0.0 {
            out.x = -out.x;
        } else if out.x > height {
            out.x = 2.0 * height - out.x;
        } else {
            return Ok(out);
        }
        out.u = -out.u;
        out.parity = out.parity.flipped();
        out.n_refl += 1;
        out.count += 1;
    }
}

#[cold]
fn runaway(x: f64, u: f64, height: f64) -> Error {
    if !x.is_finite() || !u.is_finite() {
        Error::Unstable(format!("non-finite state x = {x}, u = {u}"))
    } else {
        Error::Unstable(format!("position {x} left the extended domain |x| <= {}", 10.0 * height))
    }
}

/// `sqrt((1 - exp(-2 lambda h)) / (2 lambda))`, the standard deviation of
/// the noise term of an exact Ornstein-Uhlenbeck step.
#[inline]
pub fn ou_noise_scale(lambda: f64, h: f64) -> f64 {
    (-(-2.0 * lambda * h).exp_m1() / (2.0 * lambda)).sqrt()
}

/// Decay factor `exp(-lambda h)` and noise amplitude
/// `sigma sqrt((1 - exp(-2 lambda h)) / (2 lambda)) = sigma_U sqrt(1 - exp(-2 lambda h))`
/// of an exact OU step with the coefficients `c`.
#[inline]
pub fn ou_step_coefficients(c: &Coefficients, h: f64) -> (f64, f64) {
    let m = (-c.lambda * h).exp_m1();
    (1.0 + m, c.sigma_u * (-m * (2.0 + m)).sqrt())
}

#[inline]
fn check_step(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(bad_step(h))
    }
}

#[cold]
fn bad_step(h: f64) -> Error {
    Error::InvalidParameter(format!("step size must be > 0, got {h}"))
}

/// Advance `s` by one step of `integrator`; `noise` supplies the standard
/// normal draw given the parity at the moment it is used.
#[inline]
pub fn step_with<F>(
    integrator: Integrator,
    s: &ParticleState,
    h: f64,
    p: &ModelParams,
    noise: F,
) -> Result<StepRecord>
where
    F: FnOnce(Sign) -> f64,
{
    check_step(h)?;
    match integrator {
        Integrator::SymplecticEuler => se_impl(s, h, p, noise),
        Integrator::GeometricLangevin => gl_impl(s, h, p, noise),
        Integrator::Baoab => baoab_impl(s, h, p, noise),
    }
}

#[inline]
fn se_impl<F: FnOnce(Sign) -> f64>(
    s: &ParticleState,
    h: f64,
    p: &ModelParams,
    noise: F,
) -> Result<StepRecord> {
    let c = p.coefficients(s.x);
    let xi = noise(s.parity);
    let u = (1.0 - c.lambda * h) * s.u - c.dv_dx(s.u) * h + c.sigma * h.sqrt() * xi;
    let r = reflect(s.x + u * h, u, p.height, s.parity, s.n_refl)?;
    Ok(StepRecord {
        state: ParticleState {
            x: r.x,
            u: r.u,
            t: s.t + h,
            parity: r.parity,
            n_refl: r.n_refl,
        },
        reflections: r.count,
        noise: xi,
        noise_parity: s.parity,
        stability_warning: c.lambda * h >= 2.0,
    })
}

#[inline]
fn gl_impl<F: FnOnce(Sign) -> f64>(
    s: &ParticleState,
    h: f64,
    p: &ModelParams,
    noise: F,
) -> Result<StepRecord> {
    let c = p.coefficients(s.x);
    let xi = noise(s.parity);
    let (decay, amp) = ou_step_coefficients(&c, h);
    let u_star = decay * s.u + amp * xi;
    let u = u_star - c.dv_dx(u_star) * h;
    let r = reflect(s.x + u * h, u, p.height, s.parity, s.n_refl)?;
    Ok(StepRecord {
        state: ParticleState {
            x: r.x,
            u: r.u,
            t: s.t + h,
            parity: r.parity,
            n_refl: r.n_refl,
        },
        reflections: r.count,
        noise: xi,
        noise_parity: s.parity,
        stability_warning: false,
    })
}

#[inline]
fn baoab_impl<F: FnOnce(Sign) -> f64>(
    s: &ParticleState,
    h: f64,
    p: &ModelParams,
    noise: F,
) -> Result<StepRecord> {
    let half = 0.5 * h;
    let c0 = p.coefficients(s.x);
    let u_half = s.u - c0.dv_dx(s.u) * half;
    let mid = reflect(s.x + u_half * half, u_half, p.height, s.parity, s.n_refl)?;

    let c1 = p.coefficients(mid.x);
    let xi = noise(mid.parity);
    let (decay, amp) = ou_step_coefficients(&c1, h);
    let u_star = decay * mid.u + amp * xi;
    let end = reflect(mid.x + u_star * half, u_star, p.height, mid.parity, mid.n_refl)?;

    let c2 = p.coefficients(end.x);
    let u = end.u - c2.dv_dx(end.u) * half;
    if !u.is_finite() {
        return Err(runaway(end.x, u, p.height));
    }
    Ok(StepRecord {
        state: ParticleState {
            x: end.x,
            u,
            t: s.t + h,
            parity: end.parity,
            n_refl: end.n_refl,
        },
        reflections: mid.count + end.count,
        noise: xi,
        noise_parity: mid.parity,
        stability_warning: false,
    })
}

/// Symplectic Euler:
/// `U' = (1 - lambda h) U - dV/dX(X, U) h + sigma sqrt(h) xi`, `X' = X + U' h`.
pub fn se_step(s: &ParticleState, h: f64, xi: f64, p: &ModelParams) -> Result<StepRecord> {
    step_with(Integrator::SymplecticEuler, s, h, p, |_| xi)
}

/// Geometric Langevin: exact OU step in `U`, then a kick with `dV/dX`
/// evaluated at the post-OU velocity, then the drift in `X`.
pub fn gl_step(s: &ParticleState, h: f64, xi: f64, p: &ModelParams) -> Result<StepRecord> {
    step_with(Integrator::GeometricLangevin, s, h, p, |_| xi)
}

/// BAOAB with the OU coefficients taken at the midpoint position.
pub fn baoab_step(s: &ParticleState, h: f64, xi: f64, p: &ModelParams) -> Result<StepRecord> {
    step_with(Integrator::Baoab, s, h, p, |_| xi)
}
