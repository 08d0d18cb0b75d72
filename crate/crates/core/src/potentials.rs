//! Gaussian potentials on x built from (expected) model densities. The Gibbs
//! sampler feeds point-mass expectations through the same code, so the two
//! inference engines share one construction.

use nalgebra::{DMatrix, DVector};

use crate::distributions::{GaussianInfo, MniwExpectations};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// The N(0, I) prior on x_1 as a normalized factor.
pub fn initial_prior(m: usize) -> GaussianInfo {
    GaussianInfo {
        j: DMatrix::identity(m, m),
        h: DVector::zeros(m),
        log_normalizer: 0.5 * m as f64 * LN_2PI,
    }
}

/// `E ln N(y | C x + d, S)` as a factor on x, with `W = [C | d]`.
pub fn gaussian_evidence(e: &MniwExpectations, y: &DVector<f64>) -> GaussianInfo {
    let m = e.wt_sigma_inv_w.nrows() - 1;
    let n = y.len();
    let p = &e.wt_sigma_inv_w;
    let g = &e.sigma_inv_w;
    let gx = g.columns(0, m);
    let gb = g.column(m);
    let j = p.view((0, 0), (m, m)).into_owned();
    let h = gx.transpose() * y - p.view((0, m), (m, 1)).column(0);
    let log_normalizer = 0.5 * y.dot(&(&e.sigma_inv * y)) - y.dot(&gb) + 0.5 * p[(m, m)] - 0.5 * e.log_det_sigma_inv
        + 0.5 * n as f64 * LN_2PI;
    GaussianInfo { j, h, log_normalizer }
}
