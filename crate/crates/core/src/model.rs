//! Boundary-layer turbulence profiles and the coefficients of the
//! position-velocity SDE
//!
//! ```text
//! dU = -lambda(X) U dt - dV/dX(X, U) dt + sigma(X) dW,    dX = U dt
//! ```
//!
//! with `sigma_U(X) = kappa_sigma u_* (1 - X/H)^(3/4)` and
//! `tau(X) = kappa_tau X / sigma_U(X)`. Both profiles are frozen below
//! `eps_reg` and above `H - eps_reg`; inside those zones every height
//! derivative is exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary-layer constants in nondimensional units (`X_ref = H`,
/// `U_ref = 1 m/s`, `t_ref = 1000 s`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kappa_sigma: f64,
    pub kappa_tau: f64,
    pub u_star: f64,
    pub height: f64,
    pub eps_reg: f64,
    /// Reference height inside the logarithm of the potential. Only its
    /// derivative enters the dynamics.
    pub x_ref: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            kappa_sigma: 1.3,
            kappa_tau: 0.5,
            u_star: 0.2,
            height: 1.0,
            eps_reg: 0.01,
            x_ref: 1.0,
        }
    }
}

/// All profile-derived quantities at one height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub sigma_u: f64,
    pub sigma_u2: f64,
    /// d(sigma_U^2)/dX of the clamped profile.
    pub dsigma_u2_dx: f64,
    /// d(log sigma_U^2)/dX of the clamped profile.
    pub dlog_sigma_u2_dx: f64,
    pub lambda: f64,
    /// Diffusion coefficient `sqrt(2 sigma_U^2 lambda)`.
    pub sigma: f64,
}

impl Coefficients {
    /// `dV/dX(X, u) = -1/2 (1 + u^2/sigma_U^2) d(sigma_U^2)/dX`.
    #[inline]
    pub fn dv_dx(&self, u: f64) -> f64 {
        -0.5 * (self.dsigma_u2_dx + u * u * self.dlog_sigma_u2_dx)
    }
}

impl ModelParams {
    pub fn with_eps_reg(mut self, eps_reg: f64) -> Self {
        self.eps_reg = eps_reg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kappa_sigma", self.kappa_sigma),
            ("kappa_tau", self.kappa_tau),
            ("u_star", self.u_star),
            ("height", self.height),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.eps_reg > 0.0 && self.eps_reg < 0.5 * self.height) {
            return Err(Error::InvalidParameter(format!(
                "eps_reg must lie in (0, H/2) = (0, {}), got {}",
                0.5 * self.height,
                self.eps_reg
            )));
        }
        if !(self.x_ref.is_finite() && self.x_ref > 0.0 && self.x_ref <= self.height) {
            return Err(Error::InvalidParameter(format!(
                "x_ref must lie in (0, H], got {}",
                self.x_ref
            )));
        }
        Ok(())
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if x.is_finite() && (0.0..=self.height).contains(&x) {
            Ok(())
        } else {
            Err(Error::Domain { x, height: self.height })
        }
    }

    #[inline]
    fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.eps_reg, self.height - self.eps_reg)
    }

    /// Coefficients at `x` without the domain check. Callers guarantee
    /// `0 <= x <= H`; the integrators do so by reflecting after every
    /// position update.
    #[inline(always)]
    pub fn coefficients(&self, x: f64) -> Coefficients {
        let xc = self.clamp(x);
        let inv_h = 1.0 / self.height;
        let inv_tau_scale = 1.0 / (self.kappa_tau * xc);
        let scale = self.kappa_sigma * self.u_star;
        let t = 1.0 - xc * inv_h;
        let s = t.sqrt();
        let q = s.sqrt();
        let sigma_u = scale * s * q;
        let sigma_u2 = scale * scale * t * s;
        let inside = x >= self.eps_reg && x <= self.height - self.eps_reg;
        let (dsigma_u2_dx, dlog_sigma_u2_dx) = if inside {
            (-1.5 * scale * scale * s * inv_h, -1.5 * inv_h / t)
        } else {
            (0.0, 0.0)
        };
        let lambda = sigma_u * inv_tau_scale;
        let sigma = (2.0 * sigma_u2 * lambda).sqrt();
        Coefficients {
            sigma_u,
            sigma_u2,
            dsigma_u2_dx,
            dlog_sigma_u2_dx,
            lambda,
            sigma,
        }
    }

    /// Largest value of `lambda` over the boundary layer.
    pub fn lambda_max(&self) -> f64 {
        self.coefficients(self.eps_reg).lambda
    }

    /// Symplectic Euler is stable only for `h < 2 / lambda`.
    pub fn se_stability_limit(&self) -> f64 {
        2.0 / self.lambda_max()
    }
}

/// Velocity scale `sigma_U(x)` of the clamped profile.
pub fn sigma_u(x: f64, p: &ModelParams) -> Result<f64> {
    p.check_domain(x)?;
    Ok(p.coefficients(x).sigma_u)
}

/// Velocity decorrelation time `tau(x) = kappa_tau x_c / sigma_U(x_c)`.
pub fn tau(x: f64, p: &ModelParams) -> Result<f64> {
    p.check_domain(x)?;
    Ok(1.0 / p.coefficients(x).lambda)
}

/// Inverse decorrelation time `1 / tau(x)`.
pub fn lambda(x: f64, p: &ModelParams) -> Result<f64> {
    p.check_domain(x)?;
    Ok(p.coefficients(x).lambda)
}

/// Diffusion coefficient `sqrt(2 sigma_U^2 / tau)`.
pub fn diffusion_sigma(x: f64, p: &ModelParams) -> Result<f64> {
    p.check_domain(x)?;
    Ok(p.coefficients(x).sigma)
}

/// Height derivative of the potential; minus this is the well-mixed drift.
pub fn dv_dx(x: f64, u: f64, p: &ModelParams) -> Result<f64> {
    p.check_domain(x)?;
    if !u.is_finite() {
        return Err(Error::InvalidParameter(format!("velocity must be finite, got {u}")));
    }
    Ok(p.coefficients(x).dv_dx(u))
}

/// Potential `V(X, U) = -1/2 [sigma_U^2 + U^2 log(sigma_U^2 / sigma_U^2(x_ref))]`.
pub fn potential(x: f64, u: f64, p: &ModelParams) -> Result<f64> {
    p.check_domain(x)?;
    let s2 = p.coefficients(x).sigma_u2;
    let s2_ref = p.coefficients(p.x_ref).sigma_u2;
    Ok(-0.5 * (s2 + u * u * (s2 / s2_ref).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn p() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn sigma_u_examples() {
        assert!(rel(sigma_u(0.005, &p()).unwrap(), 0.25805) < 1e-4);
        assert!(rel(sigma_u(0.05, &p()).unwrap(), 0.25019) < 1e-4);
        assert!(rel(sigma_u(0.995, &p()).unwrap(), 0.008222) < 1e-3);
    }

    #[test]
    fn tau_and_lambda_examples() {
        assert!(rel(tau(0.05, &p()).unwrap(), 0.09992) < 1e-4);
        assert!(rel(tau(0.005, &p()).unwrap(), 0.019376) < 1e-4);
        // 19.4 s in physical units, below the 20 s cap
        assert!(tau(0.005, &p()).unwrap() * 1000.0 < 20.0);
        assert!(rel(tau(0.99, &p()).unwrap(), 60.2) < 1e-3);
        assert!(rel(lambda(0.01, &p()).unwrap(), 51.61) < 1e-3);
        assert!(rel(lambda(0.05, &p()).unwrap(), 10.008) < 1e-4);
        assert!(rel(lambda(0.5, &p()).unwrap(), 0.6184) < 1e-3);
        assert!(rel(p().se_stability_limit(), 2.0 / 51.61) < 1e-3);
    }

    #[test]
    fn diffusion_examples() {
        assert!(rel(diffusion_sigma(0.05, &p()).unwrap(), 1.1193) < 1e-4);
        assert_eq!(diffusion_sigma(0.0, &p()).unwrap(), diffusion_sigma(0.01, &p()).unwrap());
    }

    #[test]
    fn dv_dx_examples() {
        assert!(rel(dv_dx(0.05, 0.1, &p()).unwrap(), 0.05731) < 1e-3);
        assert_eq!(dv_dx(0.005, 3.7, &p()).unwrap(), 0.0);
        assert!(rel(dv_dx(0.5, 0.0, &p()).unwrap(), 0.035851) < 1e-4);
    }

    #[test]
    fn domain_errors() {
        assert!(sigma_u(-0.1, &p()).is_err());
        assert!(tau(1.1, &p()).is_err());
        assert!(lambda(f64::NAN, &p()).is_err());
        assert!(dv_dx(0.5, f64::INFINITY, &p()).is_err());
    }

    #[test]
    fn validation() {
        assert!(p().validate().is_ok());
        assert!(p().with_eps_reg(0.6).validate().is_err());
        assert!(p().with_eps_reg(0.0).validate().is_err());
    }

    fn grid() -> impl Iterator<Item = f64> {
        (0..=10_000).map(|i| i as f64 / 10_000.0)
    }

    #[test]
    fn clamp_consistency() {
        let p = p();
        let lo = p.coefficients(p.eps_reg);
        let hi = p.coefficients(p.height - p.eps_reg);
        for x in grid() {
            let c = p.coefficients(x);
            if x <= p.eps_reg {
                assert_eq!(c.sigma_u, lo.sigma_u);
                assert_eq!(c.lambda, lo.lambda);
            }
            if x >= p.height - p.eps_reg {
                assert_eq!(c.sigma_u, hi.sigma_u);
                assert_eq!(c.lambda, hi.lambda);
            }
        }
    }

    #[test]
    fn monotone_profiles_and_identity() {
        let p = p();
        let mut prev_tau = 0.0;
        let mut prev_lambda = f64::INFINITY;
        for x in grid() {
            let t = tau(x, &p).unwrap();
            let l = lambda(x, &p).unwrap();
            assert!(t >= prev_tau && l <= prev_lambda, "x = {x}");
            prev_tau = t;
            prev_lambda = l;
            let s = diffusion_sigma(x, &p).unwrap();
            let su = sigma_u(x, &p).unwrap();
            assert!(rel(s * s, 2.0 * su * su * l) < 1e-12);
            assert!(rel(s * s * t / 2.0, su * su) < 1e-12);
        }
    }

    #[test]
    fn dv_dx_even_in_velocity() {
        let p = p();
        for x in grid().step_by(37) {
            for u in [0.0, 0.1, 0.7, 2.5] {
                assert_eq!(dv_dx(x, u, &p).unwrap(), dv_dx(x, -u, &p).unwrap());
            }
        }
    }

    #[test]
    fn dv_dx_matches_central_difference_of_potential() {
        let p = ModelParams { x_ref: 0.5, ..ModelParams::default() };
        let step = 1e-6;
        for x in grid().step_by(50) {
            if x < p.eps_reg + 1e-3 || x > p.height - p.eps_reg - 1e-3 {
                continue;
            }
            for u in [0.0, 0.1, -0.4] {
                let fd = (potential(x + step, u, &p).unwrap() - potential(x - step, u, &p).unwrap())
                    / (2.0 * step);
                let exact = dv_dx(x, u, &p).unwrap();
                assert!(rel(exact, fd) < 1e-4, "x = {x}, u = {u}: {exact} vs {fd}");
            }
        }
    }
}
