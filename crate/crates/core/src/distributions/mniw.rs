//! Matrix-normal inverse-Wishart prior for multivariate linear regression
//! `y = W x + e`, `e ~ N(0, Σ)`, with `Σ ~ IW(S0, n0)` and
//! `W | Σ ~ MN(M0, Σ, V0)` (row covariance Σ, column covariance V0).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, inv_spd, log_det_spd, std_normal_mat, symmetrize};

#[derive(Debug, Clone, PartialEq)]
pub struct MniwParams {
    /// Mean matrix, p x q.
    pub m0: DMatrix<f64>,
    /// Column covariance, q x q.
    pub v0: DMatrix<f64>,
    /// Inverse-Wishart scale, p x p.
    pub s0: DMatrix<f64>,
    /// Inverse-Wishart degrees of freedom, > p - 1.
    pub n0: f64,
}

/// Regression sufficient statistics. They double as the natural
/// parameters of the MNIW family: a posterior is `prior.natural() + stats`.
#[derive(Debug, Clone, PartialEq)]
pub struct MniwStats {
    /// sum x x^T, q x q
    pub xx: DMatrix<f64>,
    /// sum y x^T, p x q
    pub yx: DMatrix<f64>,
    /// sum y y^T, p x p
    pub yy: DMatrix<f64>,
    /// (weighted) row count
    pub n: f64,
}

impl MniwStats {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            xx: DMatrix::zeros(q, q),
            yx: DMatrix::zeros(p, q),
            yy: DMatrix::zeros(p, p),
            n: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.yy.nrows()
    }

    pub fn q(&self) -> usize {
        self.xx.nrows()
    }

    pub fn add_row(&mut self, x: &DVector<f64>, y: &DVector<f64>, weight: f64) {
        self.xx.ger(weight, x, x, 1.0);
        self.yx.ger(weight, y, x, 1.0);
        self.yy.ger(weight, y, y, 1.0);
        self.n += weight;
    }

    /// Accumulate expected outer products `E[x x^T]`, `E[y x^T]`, `E[y y^T]`.
    pub fn add_expected(&mut self, xx: &DMatrix<f64>, yx: &DMatrix<f64>, yy: &DMatrix<f64>, weight: f64) {
        self.xx += xx * weight;
        self.yx += yx * weight;
        self.yy += yy * weight;
        self.n += weight;
    }

    pub fn add(&mut self, other: &MniwStats) {
        self.xx += &other.xx;
        self.yx += &other.yx;
        self.yy += &other.yy;
        self.n += other.n;
    }

    pub fn scaled(&self, f: f64) -> MniwStats {
        MniwStats {
            xx: &self.xx * f,
            yx: &self.yx * f,
            yy: &self.yy * f,
            n: self.n * f,
        }
    }

    /// `a * self + b * other`
    pub fn affine(&self, a: f64, other: &MniwStats, b: f64) -> MniwStats {
        MniwStats {
            xx: &self.xx * a + &other.xx * b,
            yx: &self.yx * a + &other.yx * b,
            yy: &self.yy * a + &other.yy * b,
            n: self.n * a + other.n * b,
        }
    }
}

/// Closed-form expectations under an MNIW distribution.
#[derive(Debug, Clone)]
pub struct MniwExpectations {
    /// E[Σ^{-1}]
    pub sigma_inv: DMatrix<f64>,
    /// E[Σ^{-1} W]
    pub sigma_inv_w: DMatrix<f64>,
    /// E[W^T Σ^{-1} W]
    pub wt_sigma_inv_w: DMatrix<f64>,
    /// E[ln |Σ^{-1}|]
    pub log_det_sigma_inv: f64,
}

impl MniwExpectations {
    /// Expectations of a point mass at `(w, sigma)`.
    pub fn point(w: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        let sigma_inv = inv_spd(sigma, "noise covariance")?;
        let sigma_inv_w = &sigma_inv * w;
        Ok(Self {
            wt_sigma_inv_w: symmetrize(&(w.transpose() * &sigma_inv_w)),
            log_det_sigma_inv: -log_det_spd(sigma, "noise covariance")?,
            sigma_inv,
            sigma_inv_w,
        })
    }

    /// `E[ln N(y | W x, Σ)]` given expected outer products of `y` and `x`.
    pub fn expected_loglik(&self, e_yy: &DMatrix<f64>, e_yx: &DMatrix<f64>, e_xx: &DMatrix<f64>) -> f64 {
        let p = e_yy.nrows() as f64;
        -0.5 * self.sigma_inv.component_mul(e_yy).sum() + self.sigma_inv_w.component_mul(e_yx).sum()
            - 0.5 * self.wt_sigma_inv_w.component_mul(e_xx).sum()
            + 0.5 * self.log_det_sigma_inv
            - 0.5 * p * (2.0 * std::f64::consts::PI).ln()
    }
}

impl MniwParams {
    pub fn new(m0: DMatrix<f64>, v0: DMatrix<f64>, s0: DMatrix<f64>, n0: f64) -> Result<Self> {
        let (p, q) = m0.shape();
        if v0.shape() != (q, q) {
            return Err(Error::Dimension(format!(
                "MNIW column covariance must be {q}x{q}, got {:?}",
                v0.shape()
            )));
        }
        if s0.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "MNIW scale must be {p}x{p}, got {:?}",
                s0.shape()
            )));
        }
        if !(n0 > p as f64 - 1.0) {
            return Err(Error::InvalidParameter(format!(
                "MNIW degrees of freedom {n0} must exceed p - 1 = {}",
                p as f64 - 1.0
            )));
        }
        nalgebra::Cholesky::new(v0.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("MNIW column covariance".into()))?;
        nalgebra::Cholesky::new(s0.clone()).ok_or_else(|| Error::NotPositiveDefinite("MNIW scale".into()))?;
        Ok(Self { m0, v0, s0, n0 })
    }

    pub fn p(&self) -> usize {
        self.m0.nrows()
    }

    pub fn q(&self) -> usize {
        self.m0.ncols()
    }

    /// Natural parameters `(V^{-1}, M V^{-1}, S + M V^{-1} M^T, n)`.
    pub fn natural(&self) -> Result<MniwStats> {
        let v_inv = inv_spd(&self.v0, "MNIW column covariance")?;
        let mv = &self.m0 * &v_inv;
        Ok(MniwStats {
            yy: symmetrize(&(&self.s0 + &mv * self.m0.transpose())),
            xx: v_inv,
            yx: mv,
            n: self.n0,
        })
    }

    pub fn from_natural(nat: &MniwStats) -> Result<Self> {
        let chol = cholesky(&nat.xx, "MNIW natural precision")?;
        let v = symmetrize(&chol.inverse());
        let m = chol.solve(&nat.yx.transpose()).transpose();
        let s = symmetrize(&(&nat.yy - &m * nat.yx.transpose()));
        Self::new(m, v, s, nat.n)
    }

    /// E[W], E[Σ]
    pub fn mean(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self.p() as f64;
        (self.m0.clone(), &self.s0 / (self.n0 - p - 1.0))
    }

    /// Joint mode of `(W, Σ)`.
    pub fn mode(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p, q) = (self.p() as f64, self.q() as f64);
        (self.m0.clone(), &self.s0 / (self.n0 + p + q + 1.0))
    }

    /// ln MNIW(W, Σ)
    pub fn log_density(&self, w: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
        let (p, q) = (self.p(), self.q());
        let (pf, qf) = (p as f64, q as f64);
        let n = self.n0;
        let sig_chol = cholesky(sigma, "MNIW covariance argument")?;
        let ld_sig = crate::linalg::log_det_chol(&sig_chol);
        let sig_inv = sig_chol.inverse();
        let ln2 = 2f64.ln();
        let iw = 0.5 * n * log_det_spd(&self.s0, "MNIW scale")?
            - 0.5 * n * pf * ln2
            - ln_mvgamma(p, n / 2.0)
            - 0.5 * (n + pf + 1.0) * ld_sig
            - 0.5 * (&self.s0 * &sig_inv).trace();
        let dw = w - &self.m0;
        let v_inv = inv_spd(&self.v0, "MNIW column covariance")?;
        let mn = -0.5 * pf * qf * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * qf * ld_sig
            - 0.5 * pf * log_det_spd(&self.v0, "MNIW column covariance")?
            - 0.5 * (v_inv * dw.transpose() * sig_inv * dw).trace();
        Ok(iw + mn)
    }

    pub fn expectations(&self) -> Result<MniwExpectations> {
        let p = self.p();
        let s_inv = inv_spd(&self.s0, "MNIW scale")?;
        let sigma_inv = &s_inv * self.n0;
        let sigma_inv_w = &sigma_inv * &self.m0;
        let wt = symmetrize(&(self.m0.transpose() * &sigma_inv_w + &self.v0 * p as f64));
        let log_det = (1..=p).map(|i| digamma((self.n0 - i as f64 + 1.0) / 2.0)).sum::<f64>() + p as f64 * 2f64.ln()
            - log_det_spd(&self.s0, "MNIW scale")?;
        Ok(MniwExpectations {
            sigma_inv,
            sigma_inv_w,
            wt_sigma_inv_w: wt,
            log_det_sigma_inv: log_det,
        })
    }

    /// KL(self || other) between two MNIW distributions of the same shape.
    pub fn kl(&self, other: &MniwParams) -> Result<f64> {
        let p = self.p() as f64;
        let q = self.q() as f64;
        let (nq, np) = (self.n0, other.n0);
        let sq_inv = inv_spd(&self.s0, "MNIW scale")?;
        let ld_sq = log_det_spd(&self.s0, "MNIW scale")?;
        let ld_sp = log_det_spd(&other.s0, "MNIW scale")?;
        let kl_iw = 0.5 * np * (ld_sq - ld_sp)
            + 0.5 * nq * ((&other.s0 * &sq_inv).trace() - p)
            + ln_mvgamma(self.p(), np / 2.0)
            - ln_mvgamma(self.p(), nq / 2.0)
            + 0.5 * (nq - np) * mvdigamma(self.p(), nq / 2.0);

        let vp_inv = inv_spd(&other.v0, "MNIW column covariance")?;
        let dm = &self.m0 - &other.m0;
        let e_sigma_inv = &sq_inv * nq;
        let kl_mn = 0.5
            * (p * (&vp_inv * &self.v0).trace() + (e_sigma_inv * &dm * &vp_inv * dm.transpose()).trace() - p * q
                + p * (log_det_spd(&other.v0, "MNIW column covariance")?
                    - log_det_spd(&self.v0, "MNIW column covariance")?));
        Ok(kl_iw + kl_mn)
    }
}

pub(crate) fn ln_mvgamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=p).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

pub(crate) fn mvdigamma(p: usize, a: f64) -> f64 {
    (1..=p).map(|j| digamma(a + (1.0 - j as f64) / 2.0)).sum()
}

/// Conjugate posterior after observing rows `(x_i, y_i)`.
pub fn mniw_posterior(prior: &MniwParams, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<MniwParams> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!(
            "{} regressor rows but {} response rows",
            xs.len(),
            ys.len()
        )));
    }
    let mut stats = MniwStats::zeros(prior.p(), prior.q());
    for (x, y) in xs.iter().zip(ys) {
        if x.len() != prior.q() || y.len() != prior.p() {
            return Err(Error::Dimension(format!(
                "row dims ({}, {}) do not match prior ({}, {})",
                x.len(),
                y.len(),
                prior.q(),
                prior.p()
            )));
        }
        stats.add_row(x, y, 1.0);
    }
    mniw_posterior_stats(prior, &stats)
}

pub fn mniw_posterior_stats(prior: &MniwParams, stats: &MniwStats) -> Result<MniwParams> {
    if stats.p() != prior.p() || stats.q() != prior.q() {
        return Err(Error::Dimension("statistics do not match prior shape".into()));
    }
    if stats.n == 0.0 {
        return Ok(prior.clone());
    }
    let mut nat = prior.natural()?;
    nat.add(stats);
    MniwParams::from_natural(&nat)
}

/// Wishart(scale, dof) via the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    let l = cholesky(scale, "Wishart scale")?.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let shape = (dof - i as f64) / 2.0;
        let g = Gamma::new(shape, 2.0).map_err(|e| Error::InvalidParameter(format!("Wishart dof: {e}")))?;
        a[(i, i)] = g.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    Ok(symmetrize(&(&la * la.transpose())))
}

pub fn sample_inv_wishart<R: Rng + ?Sized>(s: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let s_inv = inv_spd(s, "inverse-Wishart scale")?;
    let w = sample_wishart(&s_inv, dof, rng)?;
    inv_spd(&w, "Wishart draw")
}

/// Draw `(W, Σ)` from the MNIW distribution.
pub fn sample_mniw<R: Rng + ?Sized>(params: &MniwParams, rng: &mut R) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sigma = sample_inv_wishart(&params.s0, params.n0, rng)?;
    let w = sample_matrix_normal(&params.m0, &sigma, &params.v0, rng)?;
    Ok((w, sigma))
}

/// `MN(mean, row_cov, col_cov)`
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    col_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let lr = cholesky(row_cov, "row covariance")?.l();
    let lc = cholesky(col_cov, "column covariance")?.l();
    let z = std_normal_mat(mean.nrows(), mean.ncols(), rng);
    Ok(mean + lr * z * lc.transpose())
}
