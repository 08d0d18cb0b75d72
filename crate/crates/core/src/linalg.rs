//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix. On failure the matrix is
/// symmetrized, its diagonal is bumped by `1e-8 * trace / p`, and the
/// factorization is retried once.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Chol> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let p = m.nrows().max(1) as f64;
    let mut s = symmetrize(m);
    let jitter = 1e-8 * (s.trace() / p).abs().max(f64::MIN_POSITIVE);
    for i in 0..s.nrows() {
        s[(i, i)] += jitter;
    }
    Cholesky::new(s).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn log_det_chol(c: &Chol) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

pub fn inv_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

pub fn log_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    Ok(log_det_chol(&cholesky(m, what)?))
}

pub fn std_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn std_normal_mat<R: Rng + ?Sized>(r: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    // column-major fill order; part of the reproducibility contract
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Draw from N(mean, cov).
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let c = cholesky(cov, "covariance")?;
    Ok(mean + c.l() * std_normal_vec(mean.len(), rng))
}

/// Draw from the Gaussian with precision `j` and linear term `h`
/// (mean `j^{-1} h`, covariance `j^{-1}`).
pub fn sample_info<R: Rng + ?Sized>(j: &DMatrix<f64>, h: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let c = cholesky(j, "precision")?;
    let mean = c.solve(h);
    // x = mean + L^{-T} eps has covariance (L L^T)^{-1}
    let eps = std_normal_vec(h.len(), rng);
    let dev = c
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| Error::NotPositiveDefinite("precision".into()))?;
    Ok(mean + dev)
}

/// Log density of N(x | mean, cov) given a Cholesky factor of `cov`.
pub fn mvn_logpdf_chol(x: &DVector<f64>, mean: &DVector<f64>, cov_chol: &Chol) -> f64 {
    let d = x - mean;
    let z = cov_chol
        .l_dirty()
        .solve_lower_triangular(&d)
        .unwrap_or_else(|| DVector::from_element(d.len(), f64::NAN));
    let p = x.len() as f64;
    -0.5 * z.norm_squared() - 0.5 * log_det_chol(cov_chol) - 0.5 * p * (2.0 * std::f64::consts::PI).ln()
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let c = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::DegenerateCovariance("covariance is not positive definite".into()))?;
    Ok(mvn_logpdf_chol(x, mean, &c))
}

/// `[x; 1]`
pub fn augment_one(x: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(x.len() + 1);
    v.rows_mut(0, x.len()).copy_from(x);
    v[x.len()] = 1.0;
    v
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
