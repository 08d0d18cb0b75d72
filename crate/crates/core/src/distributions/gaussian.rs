//! Gaussian factors in information form.
//!
//! A factor represents `f(x) = exp(-1/2 x^T J x + h^T x - log_normalizer)`.
//! For a normalized density `log_normalizer` equals the log partition of
//! `(J, h)`. Multiplying factors adds all three fields.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_chol, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInfo {
    pub j: DMatrix<f64>,
    pub h: DVector<f64>,
    pub log_normalizer: f64,
}

impl GaussianInfo {
    pub fn new(j: DMatrix<f64>, h: DVector<f64>, log_normalizer: f64) -> Result<Self> {
        if j.nrows() != j.ncols() || j.nrows() != h.len() {
            return Err(Error::Dimension(format!(
                "precision {:?} and linear term {} disagree",
                j.shape(),
                h.len()
            )));
        }
        Ok(Self { j, h, log_normalizer })
    }

    /// The constant factor 1 on a `dim`-dimensional space.
    pub fn zeros(dim: usize) -> Self {
        Self {
            j: DMatrix::zeros(dim, dim),
            h: DVector::zeros(dim),
            log_normalizer: 0.0,
        }
    }

    /// Normalized density N(mean, cov).
    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let c = cholesky(cov, "covariance")?;
        let j = symmetrize(&c.inverse());
        let h = &j * mean;
        let log_normalizer = 0.5 * mean.dot(&h) + 0.5 * log_det_chol(&c) + 0.5 * mean.len() as f64 * LN_2PI;
        Ok(Self { j, h, log_normalizer })
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn log_value(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.j * x)) + self.h.dot(x) - self.log_normalizer
    }

    pub fn multiply(&self, other: &GaussianInfo) -> Result<GaussianInfo> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "cannot multiply {}-d and {}-d factors",
                self.dim(),
                other.dim()
            )));
        }
        Ok(GaussianInfo {
            j: &self.j + &other.j,
            h: &self.h + &other.h,
            log_normalizer: self.log_normalizer + other.log_normalizer,
        })
    }

    pub fn multiply_in_place(&mut self, other: &GaussianInfo) {
        self.j += &other.j;
        self.h += &other.h;
        self.log_normalizer += other.log_normalizer;
    }

    /// `log ∫ f(x) dx`; requires J positive definite.
    pub fn log_partition(&self) -> Result<f64> {
        let c = cholesky(&self.j, "precision")?;
        let mean = c.solve(&self.h);
        Ok(0.5 * self.h.dot(&mean) - 0.5 * log_det_chol(&c) + 0.5 * self.dim() as f64 * LN_2PI - self.log_normalizer)
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(cholesky(&self.j, "precision")?.solve(&self.h))
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(symmetrize(&cholesky(&self.j, "precision")?.inverse()))
    }

    /// Integrate out every coordinate not listed in `keep` (Schur complement).
    pub fn marginalize(&self, keep: &[usize]) -> Result<GaussianInfo> {
        let drop = complement(self.dim(), keep)?;
        if drop.is_empty() {
            return Ok(self.select(keep));
        }
        let jaa = sub(&self.j, keep, keep);
        let jab = sub(&self.j, keep, &drop);
        let jbb = sub(&self.j, &drop, &drop);
        let ha = subv(&self.h, keep);
        let hb = subv(&self.h, &drop);
        let c = nalgebra::Cholesky::new(jbb.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("eliminated block of a Gaussian factor".into()))?;
        let jbb_inv_jba = c.solve(&jab.transpose());
        let jbb_inv_hb = c.solve(&hb);
        Ok(GaussianInfo {
            j: symmetrize(&(jaa - &jab * &jbb_inv_jba)),
            h: ha - &jab * &jbb_inv_hb,
            log_normalizer: self.log_normalizer - 0.5 * hb.dot(&jbb_inv_hb) - 0.5 * drop.len() as f64 * LN_2PI
                + 0.5 * log_det_chol(&c),
        })
    }

    /// Fix coordinates `idx` to `values`; the result lives on the rest.
    pub fn condition(&self, idx: &[usize], values: &DVector<f64>) -> Result<GaussianInfo> {
        if idx.len() != values.len() {
            return Err(Error::Dimension("conditioning values do not match indices".into()));
        }
        let rest = complement(self.dim(), idx)?;
        let jab = sub(&self.j, &rest, idx);
        let jbb = sub(&self.j, idx, idx);
        let hb = subv(&self.h, idx);
        Ok(GaussianInfo {
            j: sub(&self.j, &rest, &rest),
            h: subv(&self.h, &rest) - jab * values,
            log_normalizer: self.log_normalizer + 0.5 * values.dot(&(jbb * values)) - hb.dot(values),
        })
    }

    /// Lift onto a `dim`-dimensional space, placing this factor's
    /// coordinates at `positions`.
    pub fn embed(&self, dim: usize, positions: &[usize]) -> GaussianInfo {
        let mut out = GaussianInfo::zeros(dim);
        for (a, &pa) in positions.iter().enumerate() {
            out.h[pa] = self.h[a];
            for (b, &pb) in positions.iter().enumerate() {
                out.j[(pa, pb)] = self.j[(a, b)];
            }
        }
        out.log_normalizer = self.log_normalizer;
        out
    }

    fn select(&self, keep: &[usize]) -> GaussianInfo {
        GaussianInfo {
            j: sub(&self.j, keep, keep),
            h: subv(&self.h, keep),
            log_normalizer: self.log_normalizer,
        }
    }
}

fn complement(dim: usize, idx: &[usize]) -> Result<Vec<usize>> {
    if idx.iter().any(|&i| i >= dim) {
        return Err(Error::Dimension("index out of range".into()));
    }
    Ok((0..dim).filter(|i| !idx.contains(i)).collect())
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn subv(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}
