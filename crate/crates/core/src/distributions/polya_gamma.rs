//! Pólya-gamma PG(b, c) for integer b.
//!
//! PG(1, c) is drawn with the exact alternating-series rejection sampler
//! (Devroye's method as specialised to the Jacobi distribution J*(1, c/2)
//! by Polson, Scott and Windle). Integer b sums b independent PG(1, c)
//! draws. There is no truncation parameter anywhere.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};

const TRUNC: f64 = 0.64;
const TRUNC_RECIP: f64 = 1.0 / TRUNC;
/// Tilts are clamped to this magnitude inside exp-space arithmetic.
pub const LOGIT_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyaGammaParams {
    /// Shape. Zero is the point mass at the origin.
    pub b: f64,
    /// Tilt.
    pub c: f64,
}

impl PolyaGammaParams {
    pub fn new(b: f64, c: f64) -> Result<Self> {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::InvalidParameter(format!("PG shape must be >= 0, got {b}")));
        }
        if !c.is_finite() {
            return Err(Error::InvalidParameter(format!("PG tilt must be finite, got {c}")));
        }
        Ok(Self { b, c })
    }
}

/// E[PG(b, c)] = b / (2c) tanh(c / 2), continuous at c = 0 where it is b / 4.
pub fn pg_mean(params: PolyaGammaParams) -> f64 {
    let c = params.c.abs();
    if c < 1e-4 {
        params.b * 0.25 * (1.0 - c * c / 12.0)
    } else {
        params.b * (0.5 * c).tanh() / (2.0 * c)
    }
}

/// Var[PG(b, c)] = b / (4 c^3) (sinh c - c) sech^2(c / 2), b / 24 at c = 0.
pub fn pg_variance(params: PolyaGammaParams) -> f64 {
    let c = params.c.abs().min(LOGIT_CLAMP);
    if c < 0.1 {
        params.b * unit_variance_series(c)
    } else {
        params.b * unit_variance_closed(c)
    }
}

fn unit_variance_series(c: f64) -> f64 {
    let c2 = c * c;
    1.0 / 24.0 - c2 / 120.0 + 17.0 * c2 * c2 / 13440.0 - 31.0 * c2 * c2 * c2 / 181_440.0
        + 691.0 * c2 * c2 * c2 * c2 / 31_933_440.0
}

fn unit_variance_closed(c: f64) -> f64 {
    // sinh(c) sech^2(c/2) = 2 tanh(c/2), which does not overflow
    let sech2 = 1.0 / (0.5 * c).cosh().powi(2);
    (2.0 * (0.5 * c).tanh() - c * sech2) / (4.0 * c.powi(3))
}

/// Draw from PG(b, c). `b` must be a non-negative integer value.
pub fn sample_pg<R: Rng + ?Sized>(params: PolyaGammaParams, rng: &mut R) -> Result<f64> {
    if !params.c.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "PG tilt must be finite, got {}",
            params.c
        )));
    }
    if !(params.b >= 0.0) || params.b.fract() != 0.0 || !params.b.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "PG shape must be a non-negative integer, got {}",
            params.b
        )));
    }
    let n = params.b as u64;
    let mut total = 0.0;
    for _ in 0..n {
        total += sample_pg1(params.c, rng);
    }
    Ok(total)
}

/// Draw from PG(1, c). Assumes `c` is finite.
pub fn sample_pg1<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    let z = 0.5 * c.abs().min(LOGIT_CLAMP);
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_exp = mass_texpon(z, fz);
    loop {
        let x = if rng.random::<f64>() < p_exp {
            TRUNC + rng.sample::<f64, _>(Exp1) / fz
        } else {
            rtigauss(z, rng)
        };
        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// Coefficient a_n(x) of the alternating series for the J*(1) density.
fn series_coef(n: u32, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

/// Probability of proposing from the exponential tail piece.
fn mass_texpon(z: f64, fz: f64) -> f64 {
    let t = TRUNC;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + log_ndtr(b);
    let xa = x0 + z + log_ndtr(a);
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Inverse-Gaussian IG(1/z, 1) truncated to (0, TRUNC].
fn rtigauss<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = TRUNC;
    if TRUNC_RECIP > z {
        loop {
            let mut e1: f64 = rng.sample(Exp1);
            let mut e2: f64 = rng.sample(Exp1);
            while e1 * e1 > 2.0 * e2 / t {
                e1 = rng.sample(Exp1);
                e2 = rng.sample(Exp1);
            }
            let d = 1.0 + e1 * t;
            let x = t / (d * d);
            let alpha = (-0.5 * z * z * x).exp();
            if rng.random::<f64>() <= alpha {
                return x;
            }
        }
    } else {
        let mu = 1.0 / z;
        loop {
            let y: f64 = rng.sample::<f64, _>(StandardNormal);
            let y = y * y;
            let half_mu = 0.5 * mu;
            let mu_y = mu * y;
            let mut x = mu + half_mu * mu_y - half_mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x <= t {
                return x;
            }
        }
    }
}

/// log Φ(x), accurate in the far left tail.
pub(crate) fn log_ndtr(x: f64) -> f64 {
    if x < -20.0 {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    } else {
        (0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)).ln()
    }
}
