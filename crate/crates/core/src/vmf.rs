//! Von Mises-Fisher distributions on the circle.
//!
//! Only ratios of modified Bessel functions enter the closure, so the large
//! argument path works with exponentially scaled values.

use crate::geometry::{UnitDir, Vec2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum VmfError {
    #[error("order parameter {0} outside [0, 1)")]
    OutOfRange(f64),
    #[error("negative concentration {0}")]
    NegativeBeta(f64),
}

/// Largest order parameter accepted by [`invert_beta`].
pub const MAX_ORDER: f64 = 1.0 - 1e-9;

const SERIES_LIMIT: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub beta: f64,
    pub mean_dir: UnitDir,
}

impl VmfParams {
    pub fn new(beta: f64, mean_dir: UnitDir) -> Result<Self, VmfError> {
        if !(beta >= 0.0) {
            return Err(VmfError::NegativeBeta(beta));
        }
        Ok(Self { beta, mean_dir })
    }

    /// Distribution whose mean vector is `u` (`|u| < 1`).
    pub fn from_mean(u: Vec2) -> Result<Self, VmfError> {
        let beta = invert_beta(u.norm())?;
        let mean_dir = UnitDir::new(u).unwrap_or(UnitDir::E1);
        Ok(Self { beta, mean_dir })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressCoeffs {
    pub gamma_par: f64,
    pub gamma_perp: f64,
}

/// Symmetric 2x2 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn outer(a: Vec2) -> Self {
        Sym2 {
            xx: a.x * a.x,
            xy: a.x * a.y,
            yy: a.y * a.y,
        }
    }

    pub fn scale(self, k: f64) -> Self {
        Sym2 {
            xx: self.xx * k,
            xy: self.xy * k,
            yy: self.yy * k,
        }
    }

    /// Eigenvalues, largest first.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let m = 0.5 * (self.xx + self.yy);
        let d = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        (m + d, m - d)
    }
}

impl std::ops::Add for Sym2 {
    type Output = Sym2;

    fn add(self, o: Sym2) -> Sym2 {
        Sym2 {
            xx: self.xx + o.xx,
            xy: self.xy + o.xy,
            yy: self.yy + o.yy,
        }
    }
}

/// `e^{-x} I_k(x)` for `x >= 0`.
pub fn bessel_i_scaled(k: u32, x: f64) -> f64 {
    assert!(k <= 2, "only orders 0, 1, 2 are supported");
    let x = x.abs();
    if x < SERIES_LIMIT {
        bessel_series(k, x) * (-x).exp()
    } else {
        bessel_asymptotic_scaled(k, x)
    }
}

/// Modified Bessel function of the first kind, orders 0 to 2. Overflows to
/// infinity past `x ~ 713`; use the scaled form or the ratios there.
pub fn bessel_i(k: u32, x: f64) -> f64 {
    assert!(k <= 2, "only orders 0, 1, 2 are supported");
    let x = x.abs();
    if x < SERIES_LIMIT {
        bessel_series(k, x)
    } else {
        bessel_asymptotic_scaled(k, x) * x.exp()
    }
}

fn bessel_series(k: u32, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = (0.5 * x).powi(k as i32) / (1..=k).map(f64::from).product::<f64>();
    let mut sum = term;
    for m in 1..200 {
        let mf = m as f64;
        term *= q / (mf * (mf + k as f64));
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn bessel_asymptotic_scaled(k: u32, x: f64) -> f64 {
    let mu = 4.0 * (k * k) as f64;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut prev = f64::INFINITY;
    for j in 1..100 {
        let jf = j as f64;
        let odd = 2.0 * jf - 1.0;
        term *= -(mu - odd * odd) / (jf * 8.0 * x);
        if term.abs() >= prev {
            break;
        }
        prev = term.abs();
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum / (TAU * x).sqrt()
}

/// `I1(beta) / I0(beta)`, the mean resultant length of the distribution.
pub fn mean_resultant(beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    bessel_i_scaled(1, beta) / bessel_i_scaled(0, beta)
}

/// `I2(beta) / I0(beta)`.
pub fn second_ratio(beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    bessel_i_scaled(2, beta) / bessel_i_scaled(0, beta)
}

fn mean_resultant_derivative(beta: f64, a: f64) -> f64 {
    if beta < 1e-8 {
        return 0.5;
    }
    1.0 - a / beta - a * a
}

/// Concentration with `mean_resultant(beta) = m`.
pub fn invert_beta(m: f64) -> Result<f64, VmfError> {
    if !(0.0..MAX_ORDER).contains(&m) {
        return Err(VmfError::OutOfRange(m));
    }
    if m == 0.0 {
        return Ok(0.0);
    }
    let mut beta = if m < 0.53 {
        2.0 * m + m.powi(3) + 5.0 * m.powi(5) / 6.0
    } else if m < 0.85 {
        -0.4 + 1.39 * m + 0.43 / (1.0 - m)
    } else {
        1.0 / (m.powi(3) - 4.0 * m * m + 3.0 * m)
    };
    let (mut lo, mut hi) = (0.0, 1.0 / (1.0 - m) + 1.0);
    while mean_resultant(hi) < m {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let a = mean_resultant(beta);
        let r = a - m;
        if r.abs() < 1e-15 {
            break;
        }
        if r < 0.0 {
            lo = beta;
        } else {
            hi = beta;
        }
        let step = r / mean_resultant_derivative(beta, a);
        let mut next = beta - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - beta).abs() <= 1e-15 * beta.max(1.0) {
            beta = next;
            break;
        }
        beta = next;
    }
    Ok(beta)
}

/// Density on the circle (with respect to arc length).
pub fn vmf_pdf(u: UnitDir, p: &VmfParams) -> f64 {
    let c = u.vec().dot(p.mean_dir.vec());
    (p.beta * (c - 1.0)).exp() / (TAU * bessel_i_scaled(0, p.beta))
}

/// Draws a heading (Best-Fisher rejection from a wrapped Cauchy envelope).
pub fn vmf_sample<R: Rng + ?Sized>(p: &VmfParams, rng: &mut R) -> UnitDir {
    let kappa = p.beta;
    if kappa < 1e-8 {
        return UnitDir::from_angle(rng.random::<f64>() * TAU);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    let theta = loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let u3: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let t = f.clamp(-1.0, 1.0).acos();
            break if u3 > 0.5 { t } else { -t };
        }
    };
    p.mean_dir.rotate(theta)
}

/// `gamma_par`, `gamma_perp` for `0 < |U| < 1`.
pub fn stress_coeffs(order: f64) -> Result<StressCoeffs, VmfError> {
    if !(order > 0.0) {
        return Err(VmfError::OutOfRange(order));
    }
    let beta = invert_beta(order)?;
    let r2 = second_ratio(beta);
    let inv = 0.5 / (order * order);
    Ok(StressCoeffs {
        gamma_par: inv * (1.0 + r2),
        gamma_perp: inv * (1.0 - r2),
    })
}

/// Second moment `rho * int M_U u (x) u du` in the form
/// `rho / 2 [(1 + I2/I0) W (x) W + (1 - I2/I0) W_perp (x) W_perp]`, with `W`
/// the mean direction; equal to `rho (g_par U U + g_perp U_perp U_perp)` and
/// well defined at `U = 0`.
pub fn stress_tensor(rho: f64, u: Vec2) -> Result<Sym2, VmfError> {
    let m = u.norm();
    let beta = invert_beta(m)?;
    Ok(stress_tensor_beta(
        rho,
        beta,
        UnitDir::new(u).unwrap_or(UnitDir::E1),
    ))
}

pub fn stress_tensor_beta(rho: f64, beta: f64, dir: UnitDir) -> Sym2 {
    let r2 = second_ratio(beta);
    let w = dir.vec();
    Sym2::outer(w).scale(0.5 * rho * (1.0 + r2))
        + Sym2::outer(w.perp()).scale(0.5 * rho * (1.0 - r2))
}
