//! Quantities of interest evaluated on the terminal position: the mean
//! position, box concentrations (exact or smoothed) and binned
//! concentration fields.
//!
//! Smoothed indicators replace the step function by `g_r`, which equals a
//! polynomial `p_r` on `[-1, 1]` matching the step's endpoint values and its
//! first `r` moments, so that `1_[a,b](x) ~ g_r((x-b)/delta) - g_r((x-a)/delta)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SMOOTHING_ORDER: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingPolynomial {
    pub r: usize,
    /// Monomial coefficients, lowest degree first.
    pub coefficients: Vec<f64>,
}

impl SmoothingPolynomial {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * s + c)
    }

    /// Residuals of the endpoint and moment conditions.
    pub fn residuals(&self) -> Vec<f64> {
        let mut res = vec![self.eval(-1.0) - 1.0, self.eval(1.0)];
        for j in 0..self.r {
            let m: f64 = self
                .coefficients
                .iter()
                .enumerate()
                .map(|(k, c)| c * monomial_integral(j + k))
                .sum();
            res.push(m - step_moment(j));
        }
        res
    }
}

/// Integral of `s^m` over `[-1, 1]`.
fn monomial_integral(m: usize) -> f64 {
    if m % 2 == 0 {
        2.0 / (m + 1) as f64
    } else {
        0.0
    }
}

/// Integral of `s^j` over `[-1, 0]`, the `j`-th moment of the step `1_{s<0}`.
fn step_moment(j: usize) -> f64 {
    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
    sign / (j + 1) as f64
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting. Returns
/// `None` when a pivot falls below the working precision.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = scale * n as f64 * f64::EPSILON;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= tol {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// Degree `r + 1` polynomial with `p(-1) = 1`, `p(1) = 0` and
/// `int_{-1}^{1} s^j p(s) ds = (-1)^j / (j + 1)` for `j < r`.
pub fn build_smoothing_polynomial(r: usize) -> Result<SmoothingPolynomial> {
    if r > MAX_SMOOTHING_ORDER {
        return Err(Error::InvalidParameter(format!(
            "smoothing order r must be <= {MAX_SMOOTHING_ORDER}, got {r}"
        )));
    }
    let n = r + 2;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    a.push((0..n).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect());
    b.push(1.0);
    a.push(vec![1.0; n]);
    b.push(0.0);
    for j in 0..r {
        a.push((0..n).map(|k| monomial_integral(j + k)).collect());
        b.push(step_moment(j));
    }
    let coefficients = solve_dense(a, b).ok_or(Error::SingularSystem { r })?;
    Ok(SmoothingPolynomial { r, coefficients })
}

/// Smoothed step: 1 below -1, `p_r` on `[-1, 1]`, 0 above 1.
#[inline]
pub fn g_r(x: f64, poly: &SmoothingPolynomial) -> f64 {
    if x < -1.0 {
        1.0
    } else if x > 1.0 {
        0.0
    } else {
        poly.eval(x)
    }
}

/// Smoothed box indicator `g_r((x-b)/delta) - g_r((x-a)/delta)`.
#[inline]
pub fn smoothed_indicator(x: f64, a: f64, b: f64, poly: &SmoothingPolynomial, delta: f64) -> f64 {
    g_r((x - b) / delta, poly) - g_r((x - a) / delta, poly)
}

/// Binned concentration field over `edges`, with the outermost step terms
/// fixed to 0 (bottom) and 1 (top) so the components sum to one.
pub fn binned_field(x: f64, edges: &[f64], poly: &SmoothingPolynomial, delta: f64, out: &mut [f64]) {
    let k = edges.len() - 1;
    let term = |i: usize| {
        if i == 0 {
            0.0
        } else if i == k {
            1.0
        } else {
            g_r((x - edges[i]) / delta, poly)
        }
    };
    let mut lower = term(0);
    for (i, o) in out.iter_mut().enumerate().take(k) {
        let upper = term(i + 1);
        *o = upper - lower;
        lower = upper;
    }
}

/// Selector for the functional of the terminal position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QoISpec {
    MeanPosition,
    RawIndicator { a: f64, b: f64 },
    SmoothedIndicator { a: f64, b: f64, r: usize, delta: f64 },
    BinnedField { edges: Vec<f64>, r: usize, delta: f64 },
    /// Several functionals evaluated on the same terminal state.
    Multi { parts: Vec<QoISpec> },
}

impl QoISpec {
    /// `k` equal bins over `[0, height]`.
    pub fn uniform_bins(k: usize, height: f64, r: usize, delta: f64) -> Self {
        let edges = (0..=k).map(|i| height * i as f64 / k as f64).collect();
        QoISpec::BinnedField { edges, r, delta }
    }

    pub fn dim(&self) -> usize {
        match self {
            QoISpec::BinnedField { edges, .. } => edges.len().saturating_sub(1),
            QoISpec::Multi { parts } => parts.iter().map(QoISpec::dim).sum(),
            _ => 1,
        }
    }

    pub fn validate(&self, height: f64) -> Result<()> {
        let check_delta = |r: usize, delta: f64| {
            if r > MAX_SMOOTHING_ORDER {
                return Err(Error::InvalidParameter(format!(
                    "smoothing order r must be <= {MAX_SMOOTHING_ORDER}, got {r}"
                )));
            }
            if !(delta.is_finite() && delta > 0.0) {
                return Err(Error::InvalidParameter(format!("delta must be > 0, got {delta}")));
            }
            Ok(())
        };
        let check_box = |a: f64, b: f64| {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::InvalidParameter(format!("indicator needs a < b, got [{a}, {b}]")));
            }
            Ok(())
        };
        match self {
            QoISpec::MeanPosition => Ok(()),
            QoISpec::RawIndicator { a, b } => check_box(*a, *b),
            QoISpec::SmoothedIndicator { a, b, r, delta } => {
                check_box(*a, *b)?;
                check_delta(*r, *delta)
            }
            QoISpec::BinnedField { edges, r, delta } => {
                check_delta(*r, *delta)?;
                if edges.len() < 2 {
                    return Err(Error::InvalidParameter("binned field needs at least one bin".into()));
                }
                if edges[0] != 0.0 || (edges[edges.len() - 1] - height).abs() > 1e-12 * height {
                    return Err(Error::InvalidParameter(format!(
                        "bin edges must span [0, {height}], got [{}, {}]",
                        edges[0],
                        edges[edges.len() - 1]
                    )));
                }
                if edges.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidParameter("bin edges must be strictly increasing".into()));
                }
                Ok(())
            }
            QoISpec::Multi { parts } => {
                if parts.is_empty() {
                    return Err(Error::InvalidParameter("empty composite quantity of interest".into()));
                }
                parts.iter().try_for_each(|q| q.validate(height))
            }
        }
    }

    /// Build the smoothing polynomials once for repeated evaluation.
    pub fn compile(&self) -> Result<Qoi> {
        let part = match self {
            QoISpec::MeanPosition => Part::Mean,
            QoISpec::RawIndicator { a, b } => Part::Raw { a: *a, b: *b },
            QoISpec::SmoothedIndicator { a, b, r, delta } => Part::Smoothed {
                a: *a,
                b: *b,
                poly: build_smoothing_polynomial(*r)?,
                delta: *delta,
            },
            QoISpec::BinnedField { edges, r, delta } => Part::Binned {
                edges: edges.clone(),
                poly: build_smoothing_polynomial(*r)?,
                delta: *delta,
            },
            QoISpec::Multi { parts } => {
                let mut flat = Vec::new();
                for q in parts {
                    flat.extend(q.compile()?.parts);
                }
                return Ok(Qoi {
                    dim: self.dim(),
                    parts: flat,
                });
            }
        };
        Ok(Qoi {
            dim: self.dim(),
            parts: vec![part],
        })
    }
}

#[derive(Debug, Clone)]
enum Part {
    Mean,
    Raw { a: f64, b: f64 },
    Smoothed { a: f64, b: f64, poly: SmoothingPolynomial, delta: f64 },
    Binned { edges: Vec<f64>, poly: SmoothingPolynomial, delta: f64 },
}

/// A compiled [`QoISpec`].
#[derive(Debug, Clone)]
pub struct Qoi {
    dim: usize,
    parts: Vec<Part>,
}

impl Qoi {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Write the functional of terminal height `x` into `out[..dim]`.
    #[inline]
    pub fn evaluate_into(&self, x: f64, out: &mut [f64]) {
        let mut i = 0;
        for part in &self.parts {
            match part {
                Part::Mean => {
                    out[i] = x;
                    i += 1;
                }
                Part::Raw { a, b } => {
                    out[i] = if *a <= x && x <= *b { 1.0 } else { 0.0 };
                    i += 1;
                }
                Part::Smoothed { a, b, poly, delta } => {
                    out[i] = smoothed_indicator(x, *a, *b, poly, *delta);
                    i += 1;
                }
                Part::Binned { edges, poly, delta } => {
                    let k = edges.len() - 1;
                    binned_field(x, edges, poly, *delta, &mut out[i..i + k]);
                    i += k;
                }
            }
        }
    }

    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(x, &mut out);
        out
    }
}

/// One-off evaluation of `spec` at terminal height `x`.
pub fn evaluate(spec: &QoISpec, x: f64) -> Result<Vec<f64>> {
    Ok(spec.compile()?.evaluate(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn low_order_polynomials() {
        for r in [0, 1] {
            let p = build_smoothing_polynomial(r).unwrap();
            assert!((p.eval(0.3) - (0.5 - 0.15)).abs() < 1e-14);
            assert!(p.coefficients[2..].iter().all(|c| c.abs() < 1e-14));
        }
        let p = build_smoothing_polynomial(2).unwrap();
        let expected = [0.5, -9.0 / 8.0, 0.0, 5.0 / 8.0];
        for (c, e) in p.coefficients.iter().zip(expected) {
            assert!((c - e).abs() < 1e-12, "{:?}", p.coefficients);
        }
    }

    #[test]
    fn moment_residuals() {
        for r in 0..=MAX_SMOOTHING_ORDER {
            let p = build_smoothing_polynomial(r).unwrap();
            let worst = p.residuals().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let tol = if r <= 8 { 1e-10 } else { 1e-6 };
            assert!(worst < tol, "r = {r}: {worst}");
        }
        assert!(build_smoothing_polynomial(13).is_err());
    }

    #[test]
    fn singular_systems_are_reported() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(solve_dense(a, vec![1.0, 2.0]).is_none());
    }

    #[test]
    fn g_examples() {
        let p = build_smoothing_polynomial(2).unwrap();
        assert_eq!(g_r(-2.0, &p), 1.0);
        assert_eq!(g_r(2.0, &p), 0.0);
        assert!((g_r(0.0, &p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn smoothed_indicator_examples() {
        let p = build_smoothing_polynomial(2).unwrap();
        let (a, b) = (0.1055, 0.1555);
        assert_eq!(smoothed_indicator(0.5, a, b, &p, 0.1), 0.0);
        assert!((smoothed_indicator(a, a, b, &p, 0.1) - 0.484375).abs() < 1e-6);
        assert!((smoothed_indicator(0.1305, a, b, &p, 0.1) - 0.542969).abs() < 1e-6);
    }

    #[test]
    fn smoothed_indicator_support_and_plateau() {
        let p = build_smoothing_polynomial(4).unwrap();
        let (a, b, d) = (0.2, 0.6, 0.1);
        assert_eq!(smoothed_indicator(0.05, a, b, &p, d), 0.0);
        assert_eq!(smoothed_indicator(0.75, a, b, &p, d), 0.0);
        assert_eq!(smoothed_indicator(0.4, a, b, &p, d), 1.0);
    }

    #[test]
    fn converges_to_raw_indicator() {
        let p = build_smoothing_polynomial(4).unwrap();
        let (a, b) = (0.1055, 0.1555);
        for x in [0.05, 0.104, 0.107, 0.13, 0.154, 0.157, 0.5] {
            let raw = if a <= x && x <= b { 1.0 } else { 0.0 };
            let err: Vec<f64> = [0.1, 0.01, 0.001]
                .iter()
                .map(|&d| (smoothed_indicator(x, a, b, &p, d) - raw).abs())
                .collect();
            assert!(err[2] < 1e-12, "x = {x}: {err:?}");
        }
    }

    #[test]
    fn binned_edge_example() {
        let spec = QoISpec::uniform_bins(4, 1.0, 2, 0.1);
        let v = evaluate(&spec, 0.5).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[1] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        let v = evaluate(&spec, 0.1).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(evaluate(&QoISpec::MeanPosition, 0.1301).unwrap(), vec![0.1301]);
        let raw = QoISpec::RawIndicator { a: 0.1055, b: 0.1555 };
        assert_eq!(evaluate(&raw, 0.13).unwrap(), vec![1.0]);
        assert_eq!(evaluate(&raw, 0.2).unwrap(), vec![0.0]);
        let multi = QoISpec::Multi {
            parts: vec![QoISpec::MeanPosition, raw, QoISpec::uniform_bins(3, 1.0, 4, 0.1)],
        };
        assert_eq!(multi.dim(), 5);
        let v = evaluate(&multi, 0.13).unwrap();
        assert_eq!(&v[..2], &[0.13, 1.0]);
    }

    #[test]
    fn validation() {
        assert!(QoISpec::RawIndicator { a: 0.2, b: 0.1 }.validate(1.0).is_err());
        let s = QoISpec::SmoothedIndicator { a: 0.1, b: 0.2, r: 4, delta: 0.0 };
        assert!(s.validate(1.0).is_err());
        let s = QoISpec::BinnedField { edges: vec![0.0, 0.6, 0.5, 1.0], r: 4, delta: 0.1 };
        assert!(s.validate(1.0).is_err());
        let s = QoISpec::BinnedField { edges: vec![0.0, 0.5, 0.9], r: 4, delta: 0.1 };
        assert!(s.validate(1.0).is_err());
        assert!(QoISpec::uniform_bins(20, 1.0, 4, 0.1).validate(1.0).is_ok());
    }

    #[test]
    fn serde_round_trip() {
        let spec = QoISpec::Multi {
            parts: vec![
                QoISpec::MeanPosition,
                QoISpec::SmoothedIndicator { a: 0.1055, b: 0.1555, r: 4, delta: 0.1 },
            ],
        };
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<QoISpec>(&s).unwrap(), spec);
    }

    proptest! {
        #[test]
        fn binned_field_conserves_mass(x in 0.0f64..=1.0, k in 1usize..30, r in 0usize..9, delta in 0.005f64..0.3) {
            let spec = QoISpec::uniform_bins(k, 1.0, r, delta);
            let v = evaluate(&spec, x).unwrap();
            let sum: f64 = v.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (i, c) in v.iter().enumerate() {
                let lo = i as f64 / k as f64;
                let hi = (i + 1) as f64 / k as f64;
                if x < lo - delta || x > hi + delta {
                    prop_assert_eq!(*c, 0.0);
                }
            }
        }

        #[test]
        fn smoothed_indicator_is_bounded(x in -0.5f64..1.5, r in 0usize..9) {
            let p = build_smoothing_polynomial(r).unwrap();
            let (lo, hi) = (0..=2000)
                .map(|i| g_r(-1.0 + i as f64 / 1000.0, &p))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let v = smoothed_indicator(x, 0.2, 0.6, &p, 0.1);
            prop_assert!(v >= lo - hi - 1e-12 && v <= hi - lo + 1e-12);
        }
    }
}
