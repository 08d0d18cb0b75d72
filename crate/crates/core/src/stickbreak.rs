//! Stick-breaking logistic link and its Pólya-gamma augmentations.
//!
//! States are 0-based: a K-state link takes K-1 logits and state `k < K-1`
//! is chosen when stick `k` is the first to succeed. Both augmentations turn
//! a factor `sigma(nu)^a sigma(-nu)^(b-a)` into `exp(kappa nu - omega nu^2 / 2)`
//! given `omega ~ PG(b, nu)`, so every potential here is Gaussian in x.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::distributions::{sample_pg1, GaussianInfo, LOGIT_CLAMP};
use crate::error::{Error, Result};

/// ln sigma(x), stable for any finite x.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// ln(1 + e^x)
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map K-1 logits onto the K-simplex. The last entry is the product of the
/// failure probabilities, not one minus the rest.
pub fn pi_sb(nu: &[f64]) -> DVector<f64> {
    let k = nu.len() + 1;
    let mut out = DVector::zeros(k);
    let mut rest = 1.0;
    for (i, &v) in nu.iter().enumerate() {
        out[i] = rest * sigmoid(v);
        rest *= sigmoid(-v);
    }
    out[k - 1] = rest;
    out
}

/// ln pi_sb(nu)[z]. Log-space throughout; logits are not clamped.
pub fn log_pmf(z: usize, nu: &[f64]) -> f64 {
    let mut lp = 0.0;
    for &v in &nu[..z.min(nu.len())] {
        lp += log_sigmoid(-v);
    }
    if z < nu.len() {
        lp += log_sigmoid(nu[z]);
    }
    lp
}

/// ln pi_sb(nu) for every state at once.
pub fn log_pmf_all(nu: &[f64]) -> DVector<f64> {
    let k = nu.len() + 1;
    let mut out = DVector::zeros(k);
    let mut rest = 0.0;
    for (i, &v) in nu.iter().enumerate() {
        out[i] = rest + log_sigmoid(v);
        rest += log_sigmoid(-v);
    }
    out[k - 1] = rest;
    out
}

/// d/dnu ln pi_sb(nu)[z]; entry k is I[z = k] - I[z >= k] sigma(nu_k).
pub fn grad_log_pmf(z: usize, nu: &[f64]) -> DVector<f64> {
    DVector::from_fn(nu.len(), |k, _| {
        let eq = if z == k { 1.0 } else { 0.0 };
        let ge = if z >= k { 1.0 } else { 0.0 };
        eq - ge * sigmoid(nu[k])
    })
}

/// PG shapes I[z >= k] and kappa_k = I[z = k] - I[z >= k] / 2 for K-1 sticks.
pub fn stick_targets(z: usize, n_sticks: usize) -> (DVector<f64>, DVector<f64>) {
    let active = DVector::from_fn(n_sticks, |k, _| if z >= k { 1.0 } else { 0.0 });
    let kappa = DVector::from_fn(n_sticks, |k, _| (if z == k { 1.0 } else { 0.0 }) - 0.5 * active[k]);
    (active, kappa)
}

/// Augmentation for one transition: omega_t and kappa_{t+1}.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionAug {
    pub omega: DVector<f64>,
    pub kappa: DVector<f64>,
}

/// Augmentation for one emission: xi_t and kappa(y_t) = y_t - 1/2.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionAug {
    pub xi: DVector<f64>,
    pub kappa_y: DVector<f64>,
}

/// Draw omega_k ~ PG(I[z_next >= k], nu_k). Inactive sticks are exactly zero.
pub fn sample_transition_aug<R: Rng + ?Sized>(z_next: usize, nu: &[f64], rng: &mut R) -> Result<TransitionAug> {
    check_finite(nu, "stick logits")?;
    let (active, kappa) = stick_targets(z_next, nu.len());
    let omega = DVector::from_fn(
        nu.len(),
        |k, _| {
            if active[k] > 0.0 {
                sample_pg1(nu[k], rng)
            } else {
                0.0
            }
        },
    );
    Ok(TransitionAug { omega, kappa })
}

/// Draw xi_n ~ PG(1, nu_n) for each output.
pub fn sample_emission_aug<R: Rng + ?Sized>(y: &[f64], nu_y: &[f64], rng: &mut R) -> Result<EmissionAug> {
    if y.len() != nu_y.len() {
        return Err(Error::Dimension(format!(
            "{} outputs but {} logits",
            y.len(),
            nu_y.len()
        )));
    }
    check_finite(nu_y, "emission logits")?;
    let xi = DVector::from_fn(nu_y.len(), |n, _| sample_pg1(nu_y[n], rng));
    let kappa_y = DVector::from_fn(y.len(), |n, _| y[n] - 0.5);
    Ok(EmissionAug { xi, kappa_y })
}

/// Potential exp(kappa^T nu - nu^T Omega nu / 2) on x, where
/// nu = `w` x + `offset`.
///
/// Precision is W^T Omega W and the linear term W^T (kappa - Omega offset).
/// The normalizer carries the x-free part so the factor is exact, not just
/// proportional. Rows with omega = 0 add only their kappa term.
pub fn logistic_potential(
    w: &DMatrix<f64>,
    offset: &DVector<f64>,
    omega: &DVector<f64>,
    kappa: &DVector<f64>,
) -> Result<GaussianInfo> {
    let s = w.nrows();
    if offset.len() != s || omega.len() != s || kappa.len() != s {
        return Err(Error::Dimension(format!(
            "{s} logit rows but offset/omega/kappa of length {}/{}/{}",
            offset.len(),
            omega.len(),
            kappa.len()
        )));
    }
    let m = w.ncols();
    let mut j = DMatrix::zeros(m, m);
    let mut h = DVector::zeros(m);
    let mut constant = 0.0;
    for k in 0..s {
        let row = w.row(k).transpose();
        if omega[k] != 0.0 {
            j.ger(omega[k], &row, &row, 1.0);
        }
        let coef = kappa[k] - omega[k] * offset[k];
        if coef != 0.0 {
            h.axpy(coef, &row, 1.0);
        }
        constant += kappa[k] * offset[k] - 0.5 * omega[k] * offset[k] * offset[k];
    }
    GaussianInfo::new(j, h, -constant)
}

/// Potential on x_t from the transition into `z_next`, given the recurrence
/// rows `r_mat` (K-1 x M) and `r_vec` selected for the current state.
pub fn transition_potential(aug: &TransitionAug, r_mat: &DMatrix<f64>, r_vec: &DVector<f64>) -> Result<GaussianInfo> {
    logistic_potential(r_mat, r_vec, &aug.omega, &aug.kappa)
}

/// Potential on x_t from Bernoulli outputs: precision C^T Xi C, linear term
/// C^T (kappa_y - Xi d).
pub fn bernoulli_emission_potential(aug: &EmissionAug, c: &DMatrix<f64>, d: &DVector<f64>) -> Result<GaussianInfo> {
    logistic_potential(c, d, &aug.xi, &aug.kappa_y)
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be finite")))
    }
}
