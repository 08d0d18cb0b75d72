//! Exact message passing on chains.
//!
//! The continuous chain is filtered forward in information form and then
//! sampled or smoothed backward through the conditionals
//! `x_t | x_{t+1} ~ N(G x_{t+1} + g, Σc)`. The discrete chain runs
//! forward-backward in log space.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::distributions::{GaussianInfo, MniwExpectations};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_chol, logsumexp, std_normal_vec, symmetrize, Chol};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian factor on an adjacent pair `(x_t, x_{t+1})`:
/// `exp(-1/2 [x; x']^T [[J11, J12], [J12^T, J22]] [x; x'] + h1^T x + h2^T x' - log_normalizer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPotential {
    pub j11: DMatrix<f64>,
    pub j12: DMatrix<f64>,
    pub j22: DMatrix<f64>,
    pub h1: DVector<f64>,
    pub h2: DVector<f64>,
    pub log_normalizer: f64,
}

impl PairPotential {
    pub fn zeros(m: usize) -> Self {
        Self {
            j11: DMatrix::zeros(m, m),
            j12: DMatrix::zeros(m, m),
            j22: DMatrix::zeros(m, m),
            h1: DVector::zeros(m),
            h2: DVector::zeros(m),
            log_normalizer: 0.0,
        }
    }

    /// Expected log density `E ln N(x' | A x + b, Q)` for `W = [A | b]`
    /// under the given expectations. A point mass gives the exact density.
    pub fn from_expectations(e: &MniwExpectations) -> Self {
        let m = e.sigma_inv.nrows();
        let p = &e.wt_sigma_inv_w;
        let g = &e.sigma_inv_w;
        Self {
            j11: p.view((0, 0), (m, m)).into_owned(),
            j12: -g.view((0, 0), (m, m)).transpose(),
            j22: e.sigma_inv.clone(),
            h1: -p.view((0, m), (m, 1)).column(0).into_owned(),
            h2: g.column(m).into_owned(),
            log_normalizer: 0.5 * p[(m, m)] - 0.5 * e.log_det_sigma_inv + 0.5 * m as f64 * LN_2PI,
        }
    }

    pub fn add_scaled(&mut self, other: &PairPotential, w: f64) {
        self.j11 += &other.j11 * w;
        self.j12 += &other.j12 * w;
        self.j22 += &other.j22 * w;
        self.h1 += &other.h1 * w;
        self.h2 += &other.h2 * w;
        self.log_normalizer += other.log_normalizer * w;
    }

    pub fn log_value(&self, x: &DVector<f64>, x_next: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.j11 * x)) - x.dot(&(&self.j12 * x_next)) - 0.5 * x_next.dot(&(&self.j22 * x_next))
            + self.h1.dot(x)
            + self.h2.dot(x_next)
            - self.log_normalizer
    }
}

/// Chain-structured Gaussian: one unary factor per step (prior, evidence,
/// recurrence potentials already multiplied in) and one pairwise factor per
/// transition.
#[derive(Debug, Clone)]
pub struct GaussianChain {
    pub nodes: Vec<GaussianInfo>,
    pub pairs: Vec<PairPotential>,
}

impl GaussianChain {
    pub fn new(t: usize, m: usize) -> Self {
        Self {
            nodes: vec![GaussianInfo::zeros(m); t],
            pairs: vec![PairPotential::zeros(m); t.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes.first().map_or(0, GaussianInfo::dim)
    }

    /// Unnormalized log density of a full path.
    pub fn log_value(&self, xs: &[DVector<f64>]) -> f64 {
        let mut lv: f64 = self.nodes.iter().zip(xs).map(|(n, x)| n.log_value(x)).sum();
        for (t, p) in self.pairs.iter().enumerate() {
            lv += p.log_value(&xs[t], &xs[t + 1]);
        }
        lv
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Dimension("empty Gaussian chain".into()));
        }
        if self.pairs.len() + 1 != self.nodes.len() {
            return Err(Error::Dimension(format!(
                "{} nodes need {} pair potentials, got {}",
                self.nodes.len(),
                self.nodes.len() - 1,
                self.pairs.len()
            )));
        }
        let m = self.dim();
        if self.nodes.iter().any(|n| n.dim() != m) || self.pairs.iter().any(|p| p.h1.len() != m) {
            return Err(Error::Dimension("chain potentials disagree on dimension".into()));
        }
        Ok(())
    }
}

/// Backward conditional of one step given its successor.
struct Conditional {
    chol: Chol,
    /// -Σc J12
    gain: DMatrix<f64>,
    /// Σc (hf + h1)
    offset: DVector<f64>,
}

struct Filtered {
    /// filtered (J, h) at the final step
    last_j: DMatrix<f64>,
    last_h: DVector<f64>,
    conds: Vec<Conditional>,
    log_partition: f64,
}

fn filter(chain: &GaussianChain) -> Result<Filtered> {
    chain.validate()?;
    let m = chain.dim();
    let t_len = chain.len();
    let mut jm = DMatrix::zeros(m, m);
    let mut hm = DVector::zeros(m);
    let mut log_z = 0.0;
    let mut conds = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let node = &chain.nodes[t];
        let pair = &chain.pairs[t];
        log_z -= node.log_normalizer + pair.log_normalizer;
        let jc = symmetrize(&(&jm + &node.j + &pair.j11));
        let hc = &hm + &node.h + &pair.h1;
        let chol = cholesky(&jc, "filter").map_err(|_| Error::IndefiniteMessage { t })?;
        let sol_h = chol.solve(&hc);
        let sol_j = chol.solve(&pair.j12);
        log_z += 0.5 * hc.dot(&sol_h) - 0.5 * log_det_chol(&chol) + 0.5 * m as f64 * LN_2PI;
        jm = symmetrize(&(&pair.j22 - pair.j12.transpose() * &sol_j));
        hm = &pair.h2 - pair.j12.transpose() * &sol_h;
        conds.push(Conditional {
            chol,
            gain: -sol_j,
            offset: sol_h,
        });
    }
    let last = &chain.nodes[t_len - 1];
    let last_j = symmetrize(&(jm + &last.j));
    let last_h = hm + &last.h;
    let chol = cholesky(&last_j, "filter").map_err(|_| Error::IndefiniteMessage { t: t_len - 1 })?;
    let mean = chol.solve(&last_h);
    log_z += 0.5 * last_h.dot(&mean) - 0.5 * log_det_chol(&chol) + 0.5 * m as f64 * LN_2PI - last.log_normalizer;
    Ok(Filtered {
        last_j,
        last_h,
        conds,
        log_partition: log_z,
    })
}

/// `log ∫ ∏ potentials dx_{1:T}`.
pub fn log_partition(chain: &GaussianChain) -> Result<f64> {
    Ok(filter(chain)?.log_partition)
}

/// Joint draw of x_{1:T} from the normalized chain.
pub fn ffbs_continuous<R: Rng + ?Sized>(chain: &GaussianChain, rng: &mut R) -> Result<Vec<DVector<f64>>> {
    let f = filter(chain)?;
    let t_len = chain.len();
    let m = chain.dim();
    let mut xs = vec![DVector::zeros(m); t_len];
    xs[t_len - 1] = sample_from_chol(
        &cholesky(&f.last_j, "filter").map_err(|_| Error::IndefiniteMessage { t: t_len - 1 })?,
        &f.last_h,
        rng,
    )?;
    for t in (0..t_len - 1).rev() {
        let c = &f.conds[t];
        let mean = &c.gain * &xs[t + 1] + &c.offset;
        xs[t] = mean + precision_noise(&c.chol, rng)?;
    }
    Ok(xs)
}

fn sample_from_chol<R: Rng + ?Sized>(chol: &Chol, h: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Ok(chol.solve(h) + precision_noise(chol, rng)?)
}

/// Zero-mean draw with covariance `(L L^T)^{-1}`.
fn precision_noise<R: Rng + ?Sized>(chol: &Chol, rng: &mut R) -> Result<DVector<f64>> {
    let eps = std_normal_vec(chol.l_dirty().nrows(), rng);
    chol.l()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| Error::NotPositiveDefinite("backward conditional".into()))
}

/// Exact marginal moments of the normalized chain.
#[derive(Debug, Clone)]
pub struct SmootherMoments {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// Cov(x_t, x_{t+1})
    pub cross_covs: Vec<DMatrix<f64>>,
    pub log_partition: f64,
    /// Differential entropy of the joint.
    pub entropy: f64,
}

impl SmootherMoments {
    /// E[x_t x_t^T]
    pub fn second_moment(&self, t: usize) -> DMatrix<f64> {
        &self.covs[t] + &self.means[t] * self.means[t].transpose()
    }

    /// E[x_t x_{t+1}^T]
    pub fn cross_moment(&self, t: usize) -> DMatrix<f64> {
        &self.cross_covs[t] + &self.means[t] * self.means[t + 1].transpose()
    }
}

pub fn smoother_moments(chain: &GaussianChain) -> Result<SmootherMoments> {
    let f = filter(chain)?;
    let t_len = chain.len();
    let m = chain.dim();
    let last_chol = cholesky(&f.last_j, "filter").map_err(|_| Error::IndefiniteMessage { t: t_len - 1 })?;
    let mut means = vec![DVector::zeros(m); t_len];
    let mut covs = vec![DMatrix::zeros(m, m); t_len];
    let mut cross_covs = vec![DMatrix::zeros(m, m); t_len - 1];
    means[t_len - 1] = last_chol.solve(&f.last_h);
    covs[t_len - 1] = symmetrize(&last_chol.inverse());
    let gauss_entropy = |ld_prec: f64| 0.5 * m as f64 * (1.0 + LN_2PI) - 0.5 * ld_prec;
    let mut entropy = gauss_entropy(log_det_chol(&last_chol));
    for t in (0..t_len - 1).rev() {
        let c = &f.conds[t];
        means[t] = &c.gain * &means[t + 1] + &c.offset;
        let gs = &c.gain * &covs[t + 1];
        covs[t] = symmetrize(&(c.chol.inverse() + &gs * c.gain.transpose()));
        cross_covs[t] = gs;
        entropy += gauss_entropy(log_det_chol(&c.chol));
    }
    Ok(SmootherMoments {
        means,
        covs,
        cross_covs,
        log_partition: f.log_partition,
        entropy,
    })
}

/// Discrete chain in log space: `p(z) ∝ exp(log_init[z_1] + Σ unary_t[z_t]
/// + Σ log_trans_t[z_t, z_{t+1}])`.
#[derive(Debug, Clone)]
pub struct DiscreteChain {
    pub log_init: DVector<f64>,
    /// T-1 matrices, K x K, indexed `[from, to]`.
    pub log_trans: Vec<DMatrix<f64>>,
    /// Optional per-step log likelihoods, T vectors of length K.
    pub log_unary: Option<Vec<DVector<f64>>>,
}

impl DiscreteChain {
    pub fn len(&self) -> usize {
        self.log_trans.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_states(&self) -> usize {
        self.log_init.len()
    }

    fn unary(&self, t: usize, k: usize) -> f64 {
        self.log_unary.as_ref().map_or(0.0, |u| u[t][k])
    }

    fn validate(&self) -> Result<()> {
        let k = self.n_states();
        if k == 0 {
            return Err(Error::Dimension("discrete chain has no states".into()));
        }
        if self.log_trans.iter().any(|m| m.shape() != (k, k)) {
            return Err(Error::Dimension(format!("transition factors must be {k}x{k}")));
        }
        if let Some(u) = &self.log_unary {
            if u.len() != self.len() || u.iter().any(|v| v.len() != k) {
                return Err(Error::Dimension("unary factors do not match chain".into()));
            }
        }
        Ok(())
    }

    /// Log forward messages, `alpha[t][k] = log p(z_t = k, evidence up to t)`.
    fn forward(&self) -> Result<Vec<DVector<f64>>> {
        self.validate()?;
        let k = self.n_states();
        let mut alpha = Vec::with_capacity(self.len());
        let a0 = DVector::from_fn(k, |i, _| self.log_init[i] + self.unary(0, i));
        if a0.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::ZeroLikelihood { t: 0 });
        }
        alpha.push(a0);
        let mut buf = vec![0.0; k];
        for (t, lt) in self.log_trans.iter().enumerate() {
            let prev = &alpha[t];
            let next = DVector::from_fn(k, |j, _| {
                for i in 0..k {
                    buf[i] = prev[i] + lt[(i, j)];
                }
                logsumexp(&buf) + self.unary(t + 1, j)
            });
            if next.iter().all(|v| *v == f64::NEG_INFINITY) || next.iter().any(|v| v.is_nan()) {
                return Err(Error::ZeroLikelihood { t: t + 1 });
            }
            alpha.push(next);
        }
        Ok(alpha)
    }

    fn backward(&self) -> Vec<DVector<f64>> {
        let k = self.n_states();
        let t_len = self.len();
        let mut beta = vec![DVector::zeros(k); t_len];
        let mut buf = vec![0.0; k];
        for t in (0..t_len - 1).rev() {
            let lt = &self.log_trans[t];
            let next = &beta[t + 1];
            beta[t] = DVector::from_fn(k, |i, _| {
                for j in 0..k {
                    buf[j] = lt[(i, j)] + self.unary(t + 1, j) + next[j];
                }
                logsumexp(&buf)
            });
        }
        beta
    }
}

/// Forward-backward marginals.
#[derive(Debug, Clone)]
pub struct HmmMarginals {
    /// T vectors of length K.
    pub unary: Vec<DVector<f64>>,
    /// T-1 matrices of `q(z_t = i, z_{t+1} = j)`.
    pub pairwise: Vec<DMatrix<f64>>,
    pub log_partition: f64,
}

pub fn hmm_marginals(chain: &DiscreteChain) -> Result<HmmMarginals> {
    let alpha = chain.forward()?;
    let beta = chain.backward();
    let k = chain.n_states();
    let t_len = chain.len();
    let log_z = logsumexp(alpha[t_len - 1].as_slice());
    let unary = (0..t_len)
        .map(|t| DVector::from_fn(k, |i, _| (alpha[t][i] + beta[t][i] - log_z).exp()))
        .collect();
    let pairwise = (0..t_len - 1)
        .map(|t| {
            DMatrix::from_fn(k, k, |i, j| {
                (alpha[t][i] + chain.log_trans[t][(i, j)] + chain.unary(t + 1, j) + beta[t + 1][j] - log_z).exp()
            })
        })
        .collect();
    Ok(HmmMarginals {
        unary,
        pairwise,
        log_partition: log_z,
    })
}

/// Joint draw of z_{1:T}.
pub fn ffbs_discrete<R: Rng + ?Sized>(chain: &DiscreteChain, rng: &mut R) -> Result<Vec<usize>> {
    let alpha = chain.forward()?;
    let k = chain.n_states();
    let t_len = chain.len();
    let mut z = vec![0; t_len];
    z[t_len - 1] = sample_log_categorical(alpha[t_len - 1].as_slice(), rng);
    let mut buf = vec![0.0; k];
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            buf[i] = alpha[t][i] + chain.log_trans[t][(i, z[t + 1])];
        }
        if buf.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::ZeroLikelihood { t });
        }
        z[t] = sample_log_categorical(&buf, rng);
    }
    Ok(z)
}

/// Most probable path.
pub fn viterbi(chain: &DiscreteChain) -> Result<Vec<usize>> {
    chain.validate()?;
    let k = chain.n_states();
    let t_len = chain.len();
    let mut delta = DVector::from_fn(k, |i, _| chain.log_init[i] + chain.unary(0, i));
    let mut back = Vec::with_capacity(t_len - 1);
    for (t, lt) in chain.log_trans.iter().enumerate() {
        let mut arg = vec![0usize; k];
        let next = DVector::from_fn(k, |j, _| {
            let mut best = f64::NEG_INFINITY;
            for i in 0..k {
                let v = delta[i] + lt[(i, j)];
                if v > best {
                    best = v;
                    arg[j] = i;
                }
            }
            best + chain.unary(t + 1, j)
        });
        if next.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::ZeroLikelihood { t: t + 1 });
        }
        back.push(arg);
        delta = next;
    }
    let mut z = vec![0; t_len];
    z[t_len - 1] = delta.argmax().0;
    for t in (0..t_len - 1).rev() {
        z[t] = back[t][z[t + 1]];
    }
    Ok(z)
}

/// Draw an index with probability proportional to `exp(logp)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logp.iter().map(|l| (l - m).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, l) in logp.iter().enumerate() {
        let w = (l - m).exp();
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}
