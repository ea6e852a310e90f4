//! Boundary-free extended SDE used as a test oracle for the reflection
//! handling.
//!
//! The physical domain `[0, H]` is unfolded onto the real line through the
//! periodic extension `eta(x~) = x~ - n(x~) H` with `n(x~) = 2n` on
//! `[(2n-1)H, (2n+1)H)`. The physical state is `X = |eta|`, `U = S u~` with
//! `S = sign(eta)`, and the extended path driven by `xi~ = S xi` reproduces
//! the reflected path without ever reflecting.

use super::{ou_step_coefficients, Integrator, Sign};
use crate::model::{Coefficients, ModelParams};

/// Extended state `x~ = sheet H + eta` with `sheet` even and
/// `eta in [-H, H)`. Keeping the two parts apart leaves positions close to
/// any image of a boundary exactly representable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedState {
    pub sheet: i64,
    pub eta: f64,
    pub u: f64,
}

impl ExtendedState {
    pub fn new(x: f64, u: f64, height: f64) -> Self {
        Self {
            sheet: sheet_index(x, height),
            eta: eta(x, height),
            u,
        }
    }

    /// The extended coordinate `x~`.
    pub fn x(&self, height: f64) -> f64 {
        self.sheet as f64 * height + self.eta
    }

    fn moved(self, dx: f64, height: f64) -> Self {
        let mut s = Self {
            eta: self.eta + dx,
            ..self
        };
        while s.eta >= height {
            s.eta -= 2.0 * height;
            s.sheet += 2;
        }
        while s.eta < -height {
            s.eta += 2.0 * height;
            s.sheet -= 2;
        }
        s
    }
}

/// Even integer `n(x~)` of the periodic extension.
pub fn sheet_index(x: f64, height: f64) -> i64 {
    2 * ((x + height) / (2.0 * height)).floor() as i64
}

/// Periodic extension `eta(x~) in [-H, H)`.
pub fn eta(x: f64, height: f64) -> f64 {
    x - sheet_index(x, height) as f64 * height
}

fn sign_of(eta: f64) -> Sign {
    if eta >= 0.0 {
        Sign::Plus
    } else {
        Sign::Minus
    }
}

/// Physical `(X, U, S)` represented by an extended state.
pub fn to_physical(s: &ExtendedState) -> (f64, f64, Sign) {
    let sign = sign_of(s.eta);
    (s.eta.abs(), sign * s.u, sign)
}

/// Extended state on sheet `sheet` (an even integer) representing the
/// physical state `(x, u)` with parity `sign`.
pub fn from_physical(x: f64, u: f64, sign: Sign, sheet: i64) -> ExtendedState {
    ExtendedState {
        sheet,
        eta: sign * x,
        u: sign * u,
    }
}

fn local(s: &ExtendedState, p: &ModelParams) -> (Coefficients, Sign) {
    (p.coefficients(s.eta.abs()), sign_of(s.eta))
}

/// Extended drift force `-S dV/dX(|eta|, u~)`.
fn force(c: &Coefficients, sign: Sign, u: f64) -> f64 {
    -(sign * c.dv_dx(u))
}

/// One step of `integrator` applied to the extended SDE with extended-frame
/// noise `xi`.
pub fn extended_step_oracle(
    s: &ExtendedState,
    h: f64,
    xi: f64,
    p: &ModelParams,
    integrator: Integrator,
) -> ExtendedState {
    let height = p.height;
    match integrator {
        Integrator::SymplecticEuler => {
            let (c, sign) = local(s, p);
            let u = (1.0 - c.lambda * h) * s.u + force(&c, sign, s.u) * h + c.sigma * h.sqrt() * xi;
            ExtendedState { u, ..*s }.moved(u * h, height)
        }
        Integrator::GeometricLangevin => {
            let (c, sign) = local(s, p);
            let (decay, amp) = ou_step_coefficients(&c, h);
            let u_star = decay * s.u + amp * xi;
            let u = u_star + force(&c, sign, u_star) * h;
            ExtendedState { u, ..*s }.moved(u * h, height)
        }
        Integrator::Baoab => {
            let half = 0.5 * h;
            let (c0, s0) = local(s, p);
            let u_half = s.u + force(&c0, s0, s.u) * half;
            let mid = s.moved(u_half * half, height);
            let (c1, _) = local(&mid, p);
            let (decay, amp) = ou_step_coefficients(&c1, h);
            let u_star = decay * u_half + amp * xi;
            let end = mid.moved(u_star * half, height);
            let (c2, s2) = local(&end, p);
            ExtendedState {
                u: u_star + force(&c2, s2, u_star) * half,
                ..end
            }
        }
    }
}
