//! Structured mean-field variational inference with factors
//! q(z) q(x) q(omega) q(theta), and a minibatch SVI loop over independent
//! sequences.
//!
//! The local step for one sequence, given the global factors:
//!   1. q(z) from expected dynamics densities plus a Monte Carlo estimate
//!      of E ln pi(z' | z, x); a path zhat is drawn from it.
//!   2. q(omega) tilts from zhat and q(x), q(xi) tilts for Bernoulli outputs.
//!   3. q(x) by exact smoothing of the expected potentials.
//!
//! Recurrence terms are evaluated at zhat, the same single-sample
//! approximation the omega factor uses. With zhat and the tilts held fixed,
//! every closed-form block is then an exact coordinate step on the bound
//! computed by [`surrogate_elbo`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::GaussianInfo;
use crate::distributions::{pg_mean, MniwExpectations, MniwParams, MniwStats, PolyaGammaParams};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_chol, symmetrize};
use crate::messages::{
    ffbs_discrete, hmm_marginals, smoother_moments, DiscreteChain, GaussianChain, HmmMarginals, PairPotential,
    SmootherMoments,
};
use crate::model::{
    Dataset, Dynamics, Emission, EmissionFamily, Hypers, LatentPath, MarkovRows, ModelParams, Transitions, Variant,
    VariantTag,
};
use crate::potentials::{gaussian_evidence, initial_prior};
use crate::stickbreak::log_sigmoid;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct SviConfig {
    pub n_iters: usize,
    /// Step size is `base_rate * (i + 1)^(-decay)`.
    pub base_rate: f64,
    pub decay: f64,
    /// Sequences per minibatch.
    pub batch_size: usize,
    /// Monte Carlo draws for E ln pi in the q(z) update and the ELBO.
    pub mc_samples: usize,
    /// Paths zhat drawn from q(z) for the omega update.
    pub zhat_samples: usize,
    pub seed: u64,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            n_iters: 100,
            base_rate: 1.0,
            decay: 0.6,
            batch_size: 1,
            mc_samples: 10,
            zhat_samples: 1,
            seed: 0,
        }
    }
}

impl SviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 || self.batch_size == 0 || self.mc_samples == 0 || self.zhat_samples == 0 {
            return Err(Error::InvalidParameter(
                "iterations, batch size and sample counts must be at least 1".into(),
            ));
        }
        if !(self.base_rate > 0.0 && self.base_rate <= 1.0) || !(self.decay >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step sizes must lie in (0, 1]: base rate {} decay {}",
                self.base_rate, self.decay
            )));
        }
        Ok(())
    }

    pub fn step_size(&self, iteration: usize) -> f64 {
        self.base_rate * ((iteration + 1) as f64).powf(-self.decay)
    }
}

// ------------------------------------------------------- global factors

/// Gaussian over one weight row in information form. Also used, unnormalized,
/// for the matching sufficient statistics `(sum omega phi phi^T, sum kappa phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRow {
    pub j: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl GaussianRow {
    pub fn zeros(dim: usize) -> Self {
        Self {
            j: DMatrix::zeros(dim, dim),
            h: DVector::zeros(dim),
        }
    }

    /// N(mean, var I)
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Self {
        let d = mean.len();
        Self {
            j: DMatrix::identity(d, d) / var,
            h: mean / var,
        }
    }

    pub fn moments(&self) -> Result<RowMoments> {
        let chol = cholesky(&self.j, "weight-row precision")?;
        let cov = symmetrize(&chol.inverse());
        Ok(RowMoments {
            mean: chol.solve(&self.h),
            cov,
        })
    }

    fn affine(&self, a: f64, other: &GaussianRow, b: f64) -> GaussianRow {
        GaussianRow {
            j: &self.j * a + &other.j * b,
            h: &self.h * a + &other.h * b,
        }
    }

    /// KL(self || other) between normalized rows.
    pub fn kl(&self, other: &GaussianRow) -> Result<f64> {
        let q = self.moments()?;
        let p = other.moments()?;
        let d = self.h.len() as f64;
        let dm = &p.mean - &q.mean;
        let lq = log_det_chol(&cholesky(&self.j, "weight-row precision")?);
        let lp = log_det_chol(&cholesky(&other.j, "weight-row precision")?);
        Ok(0.5 * ((&other.j * &q.cov).trace() + dm.dot(&(&other.j * &dm)) - d + lq - lp))
    }
}

/// Mean and covariance of a weight row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl RowMoments {
    pub fn point(w: DVector<f64>) -> Self {
        let d = w.len();
        Self {
            mean: w,
            cov: DMatrix::zeros(d, d),
        }
    }

    /// E[w w^T]
    pub fn second(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmissionFactor {
    Gaussian(MniwStats),
    Bernoulli(Vec<GaussianRow>),
    Identity,
}

/// Natural parameters of q(theta): MNIW for dynamics and Gaussian
/// emissions, Gaussian rows for recurrence and Bernoulli weights, Dirichlet
/// concentrations for Markov rows. Sufficient statistics share this shape,
/// which makes the natural-gradient step a single affine combination.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFactors {
    pub dynamics: Vec<MniwStats>,
    pub emission: EmissionFactor,
    /// `[group][stick]`
    pub recurrence: Vec<Vec<GaussianRow>>,
    /// K x K concentrations (or counts). Off-diagonal variants ignore the diagonal.
    pub markov: Option<DMatrix<f64>>,
}

impl GlobalFactors {
    pub fn prior(shape: &Shape, n: usize, family: EmissionFamily, hypers: &Hypers) -> Result<Self> {
        let (k, m) = (shape.k, shape.m);
        let strat = shape.strategy();
        let layout = strat.layout(k, m);
        let emission = if strat.observes_x() {
            EmissionFactor::Identity
        } else {
            match family {
                EmissionFamily::Gaussian => EmissionFactor::Gaussian(hypers.emission.natural()?),
                EmissionFamily::Bernoulli => {
                    EmissionFactor::Bernoulli(vec![
                        GaussianRow::isotropic(DVector::zeros(m + 1), hypers.bernoulli_var);
                        n
                    ])
                }
            }
        };
        let mean = strat.weight_prior_mean(k, m);
        let group: Vec<GaussianRow> = (0..layout.sticks)
            .map(|s| GaussianRow::isotropic(mean.row(s).transpose(), hypers.recurrence_var))
            .collect();
        Ok(Self {
            dynamics: vec![hypers.dynamics.natural()?; k],
            emission,
            recurrence: vec![group; layout.groups],
            markov: match strat.markov_rows() {
                MarkovRows::None => None,
                _ => Some(DMatrix::from_element(k, k, hypers.alpha)),
            },
        })
    }

    /// Statistics-shaped zero.
    pub fn zeros_like(&self) -> Self {
        let z = |r: &GaussianRow| GaussianRow::zeros(r.h.len());
        Self {
            dynamics: self.dynamics.iter().map(|d| MniwStats::zeros(d.p(), d.q())).collect(),
            emission: match &self.emission {
                EmissionFactor::Gaussian(s) => EmissionFactor::Gaussian(MniwStats::zeros(s.p(), s.q())),
                EmissionFactor::Bernoulli(rows) => EmissionFactor::Bernoulli(rows.iter().map(z).collect()),
                EmissionFactor::Identity => EmissionFactor::Identity,
            },
            recurrence: self.recurrence.iter().map(|g| g.iter().map(z).collect()).collect(),
            markov: self.markov.as_ref().map(|c| DMatrix::zeros(c.nrows(), c.ncols())),
        }
    }

    /// `a * self + b * other`
    pub fn affine(&self, a: f64, other: &GlobalFactors, b: f64) -> Result<GlobalFactors> {
        let mismatch = || Error::Dimension("global factors have different shapes".into());
        if self.dynamics.len() != other.dynamics.len() || self.recurrence.len() != other.recurrence.len() {
            return Err(mismatch());
        }
        let emission = match (&self.emission, &other.emission) {
            (EmissionFactor::Gaussian(x), EmissionFactor::Gaussian(y)) => EmissionFactor::Gaussian(x.affine(a, y, b)),
            (EmissionFactor::Bernoulli(x), EmissionFactor::Bernoulli(y)) if x.len() == y.len() => {
                EmissionFactor::Bernoulli(x.iter().zip(y).map(|(r, s)| r.affine(a, s, b)).collect())
            }
            (EmissionFactor::Identity, EmissionFactor::Identity) => EmissionFactor::Identity,
            _ => return Err(mismatch()),
        };
        let markov = match (&self.markov, &other.markov) {
            (Some(x), Some(y)) => Some(x * a + y * b),
            (None, None) => None,
            _ => return Err(mismatch()),
        };
        Ok(GlobalFactors {
            dynamics: self
                .dynamics
                .iter()
                .zip(&other.dynamics)
                .map(|(x, y)| x.affine(a, y, b))
                .collect(),
            emission,
            recurrence: self
                .recurrence
                .iter()
                .zip(&other.recurrence)
                .map(|(g, h)| g.iter().zip(h).map(|(r, s)| r.affine(a, s, b)).collect())
                .collect(),
            markov,
        })
    }

    pub fn add(&mut self, other: &GlobalFactors) -> Result<()> {
        *self = self.affine(1.0, other, 1.0)?;
        Ok(())
    }

    pub fn expectations(&self, shape: &Shape) -> Result<GlobalExpectations> {
        let dynamics = self
            .dynamics
            .iter()
            .map(|d| MniwParams::from_natural(d)?.expectations())
            .collect::<Result<_>>()?;
        let emission = match &self.emission {
            EmissionFactor::Gaussian(s) => EmissionExpectations::Gaussian(MniwParams::from_natural(s)?.expectations()?),
            EmissionFactor::Bernoulli(rows) => {
                EmissionExpectations::Bernoulli(rows.iter().map(GaussianRow::moments).collect::<Result<_>>()?)
            }
            EmissionFactor::Identity => EmissionExpectations::Identity,
        };
        let recurrence = self
            .recurrence
            .iter()
            .map(|g| g.iter().map(GaussianRow::moments).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        let log_rows = match &self.markov {
            None => None,
            Some(a) => Some(expected_log_rows(a, shape.strategy().markov_rows())?),
        };
        Ok(GlobalExpectations {
            dynamics,
            emission,
            recurrence,
            log_rows,
        })
    }

    /// KL(q(theta) || p(theta)).
    pub fn kl(&self, prior: &GlobalFactors, shape: &Shape) -> Result<f64> {
        let mut kl = 0.0;
        for (q, p) in self.dynamics.iter().zip(&prior.dynamics) {
            kl += MniwParams::from_natural(q)?.kl(&MniwParams::from_natural(p)?)?;
        }
        match (&self.emission, &prior.emission) {
            (EmissionFactor::Gaussian(q), EmissionFactor::Gaussian(p)) => {
                kl += MniwParams::from_natural(q)?.kl(&MniwParams::from_natural(p)?)?;
            }
            (EmissionFactor::Bernoulli(q), EmissionFactor::Bernoulli(p)) => {
                for (r, s) in q.iter().zip(p) {
                    kl += r.kl(s)?;
                }
            }
            _ => {}
        }
        for (g, h) in self.recurrence.iter().zip(&prior.recurrence) {
            for (r, s) in g.iter().zip(h) {
                kl += r.kl(s)?;
            }
        }
        if let (Some(q), Some(p)) = (&self.markov, &prior.markov) {
            let off = shape.strategy().markov_rows() == MarkovRows::OffDiagonal;
            for i in 0..q.nrows() {
                let cols: Vec<usize> = (0..q.ncols()).filter(|&j| !(off && j == i)).collect();
                let a =
                    crate::distributions::DirichletParams::new(DVector::from_fn(cols.len(), |c, _| q[(i, cols[c])]))?;
                let b =
                    crate::distributions::DirichletParams::new(DVector::from_fn(cols.len(), |c, _| p[(i, cols[c])]))?;
                kl += a.kl(&b);
            }
        }
        Ok(kl)
    }

    /// Posterior-mean parameters, for export and prediction.
    pub fn mean_params(&self, shape: &Shape, n: usize, permutation: Vec<usize>) -> Result<ModelParams> {
        let m = shape.m;
        let mniw_mean = |s: &MniwStats| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let p = MniwParams::from_natural(s)?;
            // the mean of the covariance needs n > p + 1; fall back to the mode
            if p.n0 > p.p() as f64 + 1.0 {
                Ok(p.mean())
            } else {
                Ok(p.mode())
            }
        };
        let dynamics = self
            .dynamics
            .iter()
            .map(|d| {
                let (w, q) = mniw_mean(d)?;
                Ok(Dynamics::from_weights(&w, q))
            })
            .collect::<Result<_>>()?;
        let emission = match &self.emission {
            EmissionFactor::Gaussian(s) => {
                let (w, s) = mniw_mean(s)?;
                Emission::Gaussian {
                    c: w.columns(0, m).into_owned(),
                    d: w.column(m).into_owned(),
                    s,
                }
            }
            EmissionFactor::Bernoulli(rows) => {
                let mut w = DMatrix::zeros(rows.len(), m + 1);
                for (i, r) in rows.iter().enumerate() {
                    w.row_mut(i).copy_from(&r.moments()?.mean.transpose());
                }
                Emission::Bernoulli {
                    c: w.columns(0, m).into_owned(),
                    d: w.column(m).into_owned(),
                }
            }
            EmissionFactor::Identity => Emission::Identity,
        };
        let layout = shape.strategy().layout(shape.k, m);
        let weights = self
            .recurrence
            .iter()
            .map(|g| {
                let mut w = DMatrix::zeros(layout.sticks, layout.features);
                for (s, r) in g.iter().enumerate() {
                    w.row_mut(s).copy_from(&r.moments()?.mean.transpose());
                }
                Ok(w)
            })
            .collect::<Result<_>>()?;
        let rows = match &self.markov {
            None => None,
            Some(a) => {
                let off = shape.strategy().markov_rows() == MarkovRows::OffDiagonal;
                let mut p = DMatrix::zeros(shape.k, shape.k);
                for i in 0..shape.k {
                    let total: f64 = (0..shape.k).filter(|&j| !(off && j == i)).map(|j| a[(i, j)]).sum();
                    for j in (0..shape.k).filter(|&j| !(off && j == i)) {
                        p[(i, j)] = a[(i, j)] / total;
                    }
                }
                Some(p)
            }
        };
        let params = ModelParams {
            variant: shape.variant,
            k: shape.k,
            m,
            n,
            dynamics,
            emission,
            transitions: Transitions { weights, rows },
            permutation,
        };
        params.validate()?;
        Ok(params)
    }
}

/// E[ln pi_ij] per row over the allowed targets; forbidden entries are -inf.
fn expected_log_rows(a: &DMatrix<f64>, kind: MarkovRows) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    let off = kind == MarkovRows::OffDiagonal;
    let mut out = DMatrix::from_element(k, k, f64::NEG_INFINITY);
    for i in 0..k {
        let cols: Vec<usize> = (0..k).filter(|&j| !(off && j == i)).collect();
        let d = crate::distributions::DirichletParams::new(DVector::from_fn(cols.len(), |c, _| a[(i, cols[c])]))?;
        let el = d.expected_log();
        for (c, &j) in cols.iter().enumerate() {
            out[(i, j)] = el[c];
        }
    }
    Ok(out)
}

/// Prior natural parameters blended toward `prior + scale * stats`:
/// `eta <- (1 - rho) eta + rho (eta_prior + scale * stats)`. `rho = 0`
/// leaves the state unchanged.
pub fn update_qtheta(
    global: &GlobalFactors,
    prior: &GlobalFactors,
    stats: &GlobalFactors,
    rho: f64,
    scale: f64,
) -> Result<GlobalFactors> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("step size {rho} outside [0, 1]")));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "minibatch scale {scale} must be positive"
        )));
    }
    let target = prior.affine(1.0, stats, scale)?;
    global.affine(1.0 - rho, &target, rho)
}

// --------------------------------------------------------- expectations

#[derive(Debug, Clone)]
pub enum EmissionExpectations {
    Gaussian(MniwExpectations),
    Bernoulli(Vec<RowMoments>),
    Identity,
}

/// What the local updates need from q(theta).
#[derive(Debug, Clone)]
pub struct GlobalExpectations {
    pub dynamics: Vec<MniwExpectations>,
    pub emission: EmissionExpectations,
    /// `[group][stick]`
    pub recurrence: Vec<Vec<RowMoments>>,
    /// E[ln pi_ij], -inf where a transition is not allowed.
    pub log_rows: Option<DMatrix<f64>>,
}

impl GlobalExpectations {
    /// Expectations under a point mass at `params`.
    pub fn point(params: &ModelParams) -> Result<Self> {
        let m = params.m;
        let dynamics = params
            .dynamics
            .iter()
            .map(|d| MniwExpectations::point(&d.weights(), &d.q))
            .collect::<Result<_>>()?;
        let emission = match &params.emission {
            Emission::Gaussian { c, d, s } => {
                let mut w = DMatrix::zeros(params.n, m + 1);
                w.columns_mut(0, m).copy_from(c);
                w.column_mut(m).copy_from(d);
                EmissionExpectations::Gaussian(MniwExpectations::point(&w, s)?)
            }
            Emission::Bernoulli { c, d } => EmissionExpectations::Bernoulli(
                (0..params.n)
                    .map(|i| {
                        let mut w = DVector::zeros(m + 1);
                        w.rows_mut(0, m).copy_from(&c.row(i).transpose());
                        w[m] = d[i];
                        RowMoments::point(w)
                    })
                    .collect(),
            ),
            Emission::Identity => EmissionExpectations::Identity,
        };
        let recurrence = params
            .transitions
            .weights
            .iter()
            .map(|w| {
                (0..w.nrows())
                    .map(|s| RowMoments::point(w.row(s).transpose()))
                    .collect()
            })
            .collect();
        Ok(Self {
            dynamics,
            emission,
            recurrence,
            log_rows: params.transitions.rows.as_ref().map(|r| r.map(f64::ln)),
        })
    }

    fn geometric_transitions(&self) -> Transitions {
        Transitions {
            weights: Vec::new(),
            rows: self.log_rows.as_ref().map(|l| l.map(f64::exp)),
        }
    }
}

/// Model structure the local computations need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub variant: VariantTag,
    pub k: usize,
    pub m: usize,
}

impl Shape {
    pub fn strategy(&self) -> &'static dyn Variant {
        self.variant.strategy()
    }

    fn sticks(&self) -> usize {
        self.strategy().layout(self.k, self.m).sticks
    }
}

// --------------------------------------------------------- local factors

#[derive(Debug, Clone)]
pub struct LocalState {
    pub qx: SmootherMoments,
    pub qz: HmmMarginals,
    pub qz_entropy: f64,
    /// Paths drawn from q(z); the recurrence terms average over them.
    pub zhat: Vec<Vec<usize>>,
    /// PG tilts and E[omega], `[sample][t][stick]`.
    pub omega_tilt: Vec<Vec<DVector<f64>>>,
    pub omega: Vec<Vec<DVector<f64>>>,
    /// PG tilts and E[xi] for Bernoulli outputs, `[t][n]`; empty at masked steps.
    pub xi_tilt: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
}

impl LocalState {
    /// Point masses at a path. Augmentation expectations are left empty.
    pub fn point(path: &LatentPath, k: usize) -> Self {
        let t_len = path.len();
        let m = path.x.first().map_or(0, |x| x.len());
        let one_hot = |s: usize| DVector::from_fn(k, |i, _| if i == s { 1.0 } else { 0.0 });
        Self {
            qx: point_moments(&path.x),
            qz: HmmMarginals {
                unary: path.z.iter().map(|&s| one_hot(s)).collect(),
                pairwise: path
                    .z
                    .windows(2)
                    .map(|w| DMatrix::from_fn(k, k, |i, j| if i == w[0] && j == w[1] { 1.0 } else { 0.0 }))
                    .collect(),
                log_partition: 0.0,
            },
            qz_entropy: 0.0,
            zhat: vec![path.z.clone()],
            omega_tilt: Vec::new(),
            omega: Vec::new(),
            xi_tilt: vec![DVector::zeros(0); t_len],
            xi: vec![DVector::zeros(0); t_len],
        }
        .with_dim(m)
    }

    fn with_dim(self, _m: usize) -> Self {
        self
    }

    /// Posterior means of x and the most probable state at each step.
    pub fn summary_path(&self) -> LatentPath {
        LatentPath {
            z: self.qz.unary.iter().map(|u| u.imax()).collect(),
            x: self.qx.means.clone(),
        }
    }
}

/// Zero-covariance moments at a fixed path.
pub fn point_moments(x: &[DVector<f64>]) -> SmootherMoments {
    let m = x.first().map_or(0, |v| v.len());
    SmootherMoments {
        means: x.to_vec(),
        covs: vec![DMatrix::zeros(m, m); x.len()],
        cross_covs: vec![DMatrix::zeros(m, m); x.len().saturating_sub(1)],
        log_partition: 0.0,
        entropy: 0.0,
    }
}

/// E[phi] and E[phi phi^T] for `phi = [x; tail]`.
fn phi_moments(mean: &DVector<f64>, second: &DMatrix<f64>, tail: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = mean.len();
    let f = m + tail.len();
    let mut e = DVector::zeros(f);
    e.rows_mut(0, m).copy_from(mean);
    e.rows_mut(m, tail.len()).copy_from(tail);
    let mut s = DMatrix::zeros(f, f);
    s.view_mut((0, 0), (m, m)).copy_from(second);
    let cross = mean * tail.transpose();
    s.view_mut((0, m), (m, tail.len())).copy_from(&cross);
    s.view_mut((m, 0), (tail.len(), m)).copy_from(&cross.transpose());
    s.view_mut((m, m), (tail.len(), tail.len()))
        .copy_from(&(tail * tail.transpose()));
    (e, s)
}

/// E[(w^T phi)^2] = tr(E[w w^T] E[phi phi^T]).
fn expected_sq(row: &RowMoments, phi2: &DMatrix<f64>) -> f64 {
    row.second().component_mul(phi2).sum()
}

/// PG tilt and mean for an active/inactive stick given E[nu^2].
pub fn expected_omega(active: f64, e_nu2: f64) -> Result<(f64, f64)> {
    if e_nu2 < 0.0 {
        if e_nu2 > -1e-9 {
            return expected_omega(active, 0.0);
        }
        return Err(Error::InvalidParameter(format!(
            "E[nu^2] = {e_nu2} is negative; second moments are inconsistent"
        )));
    }
    let c = e_nu2.sqrt();
    Ok((c, pg_mean(PolyaGammaParams::new(active, c)?)))
}

type Tilts = (Vec<Vec<DVector<f64>>>, Vec<Vec<DVector<f64>>>);

/// q(omega): one PG factor per zhat sample, transition and stick, with
/// shape `I[stick active under zhat]` and tilt `sqrt(E[nu^2])`.
pub fn update_qomega(
    shape: &Shape,
    ge: &GlobalExpectations,
    qx: &SmootherMoments,
    zhat: &[Vec<usize>],
) -> Result<Tilts> {
    let strat = shape.strategy();
    let sticks = shape.sticks();
    let mut tilts = Vec::with_capacity(zhat.len());
    let mut omegas = Vec::with_capacity(zhat.len());
    for z in zhat {
        let mut tilt_path = Vec::with_capacity(z.len().saturating_sub(1));
        let mut omega_path = Vec::with_capacity(z.len().saturating_sub(1));
        for t in 0..z.len().saturating_sub(1) {
            let mut c = DVector::zeros(sticks);
            let mut w = DVector::zeros(sticks);
            if sticks > 0 {
                let g = strat.group(z[t]);
                let (_, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &strat.tail(z[t], shape.k));
                let (active, _) = strat.targets(z[t], z[t + 1], shape.k);
                for s in 0..sticks {
                    (c[s], w[s]) = expected_omega(active[s], expected_sq(&ge.recurrence[g][s], &phi2))?;
                }
            }
            tilt_path.push(c);
            omega_path.push(w);
        }
        tilts.push(tilt_path);
        omegas.push(omega_path);
    }
    Ok((tilts, omegas))
}

/// q(xi) for Bernoulli outputs at observed steps.
pub fn update_qxi(
    ge: &GlobalExpectations,
    qx: &SmootherMoments,
    data: &Dataset,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let rows = match &ge.emission {
        EmissionExpectations::Bernoulli(rows) => rows,
        _ => return Ok((vec![DVector::zeros(0); data.len()], vec![DVector::zeros(0); data.len()])),
    };
    let one = DVector::from_element(1, 1.0);
    let mut tilts = Vec::with_capacity(data.len());
    let mut xis = Vec::with_capacity(data.len());
    for t in 0..data.len() {
        if !data.mask[t] {
            tilts.push(DVector::zeros(0));
            xis.push(DVector::zeros(0));
            continue;
        }
        let (_, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &one);
        let mut c = DVector::zeros(rows.len());
        let mut w = DVector::zeros(rows.len());
        for (n, r) in rows.iter().enumerate() {
            (c[n], w[n]) = expected_omega(1.0, expected_sq(r, &phi2))?;
        }
        tilts.push(c);
        xis.push(w);
    }
    Ok((tilts, xis))
}

/// `E[kappa nu - omega nu^2 / 2]` as a factor on x, where
/// `nu = w^T [x; tail]` and w has the given moments.
pub fn expected_logistic_potential(row: &RowMoments, tail: &DVector<f64>, omega: f64, kappa: f64) -> GaussianInfo {
    let m = row.mean.len() - tail.len();
    let r = tail.len();
    let s = row.second();
    let sxx = s.view((0, 0), (m, m));
    let sxt = s.view((0, m), (m, r));
    let stt = s.view((m, m), (r, r));
    let j = sxx * omega;
    let h = row.mean.rows(0, m) * kappa - (sxt * tail) * omega;
    let constant = kappa * row.mean.rows(m, r).dot(tail) - 0.5 * omega * tail.dot(&(stt * tail));
    GaussianInfo {
        j,
        h,
        log_normalizer: -constant,
    }
}

/// The Gaussian chain whose normalization is the optimal q(x).
pub fn x_chain(shape: &Shape, ge: &GlobalExpectations, local: &LocalState, data: &Dataset) -> Result<GaussianChain> {
    let t_len = data.len();
    let m = shape.m;
    let strat = shape.strategy();
    let mut chain = GaussianChain::new(t_len, m);
    chain.nodes[0] = initial_prior(m);
    match &ge.emission {
        EmissionExpectations::Gaussian(e) => {
            for t in 0..t_len {
                if data.mask[t] {
                    chain.nodes[t].multiply_in_place(&gaussian_evidence(e, &data.y[t]));
                }
            }
        }
        EmissionExpectations::Bernoulli(rows) => {
            let one = DVector::from_element(1, 1.0);
            for t in 0..t_len {
                if data.mask[t] {
                    for (n, r) in rows.iter().enumerate() {
                        let f = expected_logistic_potential(r, &one, local.xi[t][n], data.y[t][n] - 0.5);
                        chain.nodes[t].multiply_in_place(&f);
                    }
                }
            }
        }
        EmissionExpectations::Identity => {}
    }
    if shape.sticks() > 0 {
        let wt = 1.0 / local.zhat.len() as f64;
        for (p, z) in local.zhat.iter().enumerate() {
            for t in 0..t_len - 1 {
                let g = strat.group(z[t]);
                let tail = strat.tail(z[t], shape.k);
                let (_, kappa) = strat.targets(z[t], z[t + 1], shape.k);
                for (s, row) in ge.recurrence[g].iter().enumerate() {
                    let mut f = expected_logistic_potential(row, &tail, local.omega[p][t][s], kappa[s]);
                    if wt != 1.0 {
                        f.j *= wt;
                        f.h *= wt;
                        f.log_normalizer *= wt;
                    }
                    chain.nodes[t].multiply_in_place(&f);
                }
            }
        }
    }
    let pairs: Vec<PairPotential> = ge.dynamics.iter().map(PairPotential::from_expectations).collect();
    for t in 0..t_len - 1 {
        let mut p = PairPotential::zeros(m);
        for (j, pj) in pairs.iter().enumerate() {
            let w = local.qz.unary[t + 1][j];
            if w != 0.0 {
                p.add_scaled(pj, w);
            }
        }
        chain.pairs[t] = p;
    }
    Ok(chain)
}

pub fn update_qx(
    shape: &Shape,
    ge: &GlobalExpectations,
    local: &LocalState,
    data: &Dataset,
) -> Result<SmootherMoments> {
    if shape.strategy().observes_x() {
        return Ok(point_moments(&data.y));
    }
    smoother_moments(&x_chain(shape, ge, local, data)?)
}

/// `E[ln N(x_{t+1} | A_j x_t + b_j, Q_j)]` for every t and j.
fn expected_dynamics_loglik(ge: &GlobalExpectations, qx: &SmootherMoments) -> Vec<DVector<f64>> {
    let one = DVector::from_element(1, 1.0);
    (0..qx.means.len().saturating_sub(1))
        .map(|t| {
            let (e_phi, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &one);
            let yy = qx.second_moment(t + 1);
            let m = qx.means[t].len();
            let mut yx = DMatrix::zeros(m, m + 1);
            yx.columns_mut(0, m).copy_from(&qx.cross_moment(t).transpose());
            yx.column_mut(m).copy_from(&qx.means[t + 1]);
            let _ = e_phi;
            DVector::from_iterator(
                ge.dynamics.len(),
                ge.dynamics.iter().map(|e| e.expected_loglik(&yy, &yx, &phi2)),
            )
        })
        .collect()
}

/// Symmetric square root of a covariance; exact zero for a point mass.
fn cov_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(cov.nrows(), cov.ncols());
    }
    let eig = SymmetricEigen::new(symmetrize(cov));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Monte Carlo estimate of `E[ln p(z_{t+1} = j | z_t = i, x_t)]` under q(x_t)
/// and q(theta), for every t. Exact when both are point masses.
pub fn expected_log_transitions<R: Rng + ?Sized>(
    shape: &Shape,
    ge: &GlobalExpectations,
    qx: &SmootherMoments,
    n_samples: usize,
    rng: &mut R,
) -> Vec<DMatrix<f64>> {
    let strat = shape.strategy();
    let k = shape.k;
    let tr = ge.geometric_transitions();
    let t_len = qx.means.len();
    if shape.sticks() == 0 {
        let lt = DMatrix::from_fn(k, k, |i, j| strat.log_probs(&tr, i, &[])[j]);
        return vec![lt; t_len.saturating_sub(1)];
    }
    let tails: Vec<DVector<f64>> = (0..k).map(|i| strat.tail(i, k)).collect();
    let sds: Vec<Vec<DMatrix<f64>>> = ge
        .recurrence
        .iter()
        .map(|g| g.iter().map(|r| cov_factor(&r.cov)).collect())
        .collect();
    let m = shape.m;
    let mut out = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let l = cov_factor(&qx.covs[t]);
        let mut acc = DMatrix::zeros(k, k);
        for _ in 0..n_samples {
            let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &qx.means[t] + &l * eps;
            for i in 0..k {
                let g = strat.group(i);
                let mut phi = DVector::zeros(m + tails[i].len());
                phi.rows_mut(0, m).copy_from(&x);
                phi.rows_mut(m, tails[i].len()).copy_from(&tails[i]);
                let nu: Vec<f64> = ge.recurrence[g]
                    .iter()
                    .zip(&sds[g])
                    .map(|(r, sd)| {
                        let e: f64 = rng.sample(StandardNormal);
                        r.mean.dot(&phi) + (sd * &phi).norm() * e
                    })
                    .collect();
                let lp = strat.log_probs(&tr, i, &nu);
                for j in 0..k {
                    acc[(i, j)] += lp[j];
                }
            }
        }
        out.push(acc / n_samples as f64);
    }
    out
}

/// HMM factors for q(z).
pub fn z_chain<R: Rng + ?Sized>(
    shape: &Shape,
    ge: &GlobalExpectations,
    qx: &SmootherMoments,
    n_samples: usize,
    rng: &mut R,
) -> DiscreteChain {
    let k = shape.k;
    let dyn_ll = expected_dynamics_loglik(ge, qx);
    let mut log_trans = expected_log_transitions(shape, ge, qx, n_samples, rng);
    for (lt, dl) in log_trans.iter_mut().zip(&dyn_ll) {
        for i in 0..k {
            for j in 0..k {
                lt[(i, j)] += dl[j];
            }
        }
    }
    DiscreteChain {
        log_init: DVector::from_element(k, -(k as f64).ln()),
        log_trans,
        log_unary: None,
    }
}

/// Marginals of a discrete chain together with its entropy.
pub fn chain_marginals(chain: &DiscreteChain) -> Result<(HmmMarginals, f64)> {
    let marg = hmm_marginals(chain)?;
    let mut energy: f64 = marg.unary[0]
        .iter()
        .zip(chain.log_init.iter())
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, l)| q * l)
        .sum();
    for (p, lt) in marg.pairwise.iter().zip(&chain.log_trans) {
        energy += p
            .iter()
            .zip(lt.iter())
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, l)| q * l)
            .sum::<f64>();
    }
    let entropy = marg.log_partition - energy;
    Ok((marg, entropy))
}

/// Expected sufficient statistics of one sequence, in natural-parameter shape.
pub fn local_stats(
    shape: &Shape,
    template: &GlobalFactors,
    local: &LocalState,
    data: &Dataset,
) -> Result<GlobalFactors> {
    let strat = shape.strategy();
    let (k, m) = (shape.k, shape.m);
    let mut stats = template.zeros_like();
    let one = DVector::from_element(1, 1.0);
    let qx = &local.qx;
    let t_len = data.len();
    for t in 0..t_len - 1 {
        let (_, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &one);
        let yy = qx.second_moment(t + 1);
        let mut yx = DMatrix::zeros(m, m + 1);
        yx.columns_mut(0, m).copy_from(&qx.cross_moment(t).transpose());
        yx.column_mut(m).copy_from(&qx.means[t + 1]);
        for j in 0..k {
            let w = local.qz.unary[t + 1][j];
            if w != 0.0 {
                stats.dynamics[j].add_expected(&phi2, &yx, &yy, w);
            }
        }
    }
    match &mut stats.emission {
        EmissionFactor::Gaussian(s) => {
            for t in (0..t_len).filter(|&t| data.mask[t]) {
                let (e_phi, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &one);
                let y = &data.y[t];
                s.add_expected(&phi2, &(y * e_phi.transpose()), &(y * y.transpose()), 1.0);
            }
        }
        EmissionFactor::Bernoulli(rows) => {
            for t in (0..t_len).filter(|&t| data.mask[t]) {
                let (e_phi, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &one);
                for (n, r) in rows.iter_mut().enumerate() {
                    r.j += &phi2 * local.xi[t][n];
                    r.h.axpy(data.y[t][n] - 0.5, &e_phi, 1.0);
                }
            }
        }
        EmissionFactor::Identity => {}
    }
    if shape.sticks() > 0 {
        let wt = 1.0 / local.zhat.len() as f64;
        for (p, z) in local.zhat.iter().enumerate() {
            for t in 0..t_len - 1 {
                let g = strat.group(z[t]);
                let (e_phi, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &strat.tail(z[t], k));
                let (_, kappa) = strat.targets(z[t], z[t + 1], k);
                for (s, r) in stats.recurrence[g].iter_mut().enumerate() {
                    let om = local.omega[p][t][s];
                    if om != 0.0 {
                        r.j += &phi2 * (om * wt);
                    }
                    if kappa[s] != 0.0 {
                        r.h.axpy(kappa[s] * wt, &e_phi, 1.0);
                    }
                }
            }
        }
    }
    if let Some(c) = &mut stats.markov {
        for p in &local.qz.pairwise {
            *c += p;
        }
        if strat.markov_rows() == MarkovRows::OffDiagonal {
            c.fill_diagonal(0.0);
        }
    }
    Ok(stats)
}

/// One local step: q(z) and zhat, then q(omega) and q(xi), then q(x), then
/// the tilts again at the new q(x).
pub fn local_step<R: Rng + ?Sized>(
    shape: &Shape,
    ge: &GlobalExpectations,
    local: &mut LocalState,
    data: &Dataset,
    cfg: &SviConfig,
    rng: &mut R,
) -> Result<()> {
    let chain = z_chain(shape, ge, &local.qx, cfg.mc_samples, rng);
    let (qz, entropy) = chain_marginals(&chain)?;
    local.qz = qz;
    local.qz_entropy = entropy;
    local.zhat = (0..cfg.zhat_samples)
        .map(|_| ffbs_discrete(&chain, rng))
        .collect::<Result<_>>()?;
    refresh_tilts(shape, ge, local, data)?;
    local.qx = update_qx(shape, ge, local, data)?;
    // the tilts are optimal only for the q(x) they were computed from
    refresh_tilts(shape, ge, local, data)
}

/// Recompute the omega and xi tilts at the current q(x) and zhat.
pub fn refresh_tilts(shape: &Shape, ge: &GlobalExpectations, local: &mut LocalState, data: &Dataset) -> Result<()> {
    (local.omega_tilt, local.omega) = update_qomega(shape, ge, &local.qx, &local.zhat)?;
    (local.xi_tilt, local.xi) = update_qxi(ge, &local.qx, data)?;
    Ok(())
}

// ------------------------------------------------------------------ ELBO

/// JJ bound `ln sigma(c) + kappa E[nu] - c/2 - omega/2 (E[nu^2] - c^2)` on
/// `E ln sigma(2 kappa nu)` for an active stick or output.
fn jj_bound(c: f64, omega: f64, kappa: f64, e_nu: f64, e_nu2: f64) -> f64 {
    log_sigmoid(c) + kappa * e_nu - 0.5 * c - 0.5 * omega * (e_nu2 - c * c)
}

/// Terms shared by both bounds: x_1 prior, uniform z_1, expected dynamics,
/// Gaussian emissions and Markov rows.
fn common_terms(shape: &Shape, ge: &GlobalExpectations, local: &LocalState, data: &Dataset) -> f64 {
    let m = shape.m as f64;
    let qx = &local.qx;
    let mut lp = -0.5 * qx.second_moment(0).trace() - 0.5 * m * LN_2PI - (shape.k as f64).ln();
    for (t, dl) in expected_dynamics_loglik(ge, qx).iter().enumerate() {
        lp += local.qz.unary[t + 1].dot(dl);
    }
    if let EmissionExpectations::Gaussian(e) = &ge.emission {
        let one = DVector::from_element(1, 1.0);
        for t in (0..data.len()).filter(|&t| data.mask[t]) {
            let (e_phi, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &one);
            let y = &data.y[t];
            lp += e.expected_loglik(&(y * y.transpose()), &(y * e_phi.transpose()), &phi2);
        }
    }
    lp
}

fn markov_row_term(shape: &Shape, ge: &GlobalExpectations, local: &LocalState) -> f64 {
    let Some(l) = &ge.log_rows else { return 0.0 };
    let off = shape.strategy().markov_rows() == MarkovRows::OffDiagonal;
    let mut lp = 0.0;
    for p in &local.qz.pairwise {
        for i in 0..shape.k {
            for j in 0..shape.k {
                if !(off && i == j) && p[(i, j)] > 0.0 {
                    lp += p[(i, j)] * l[(i, j)];
                }
            }
        }
    }
    lp
}

/// Deterministic lower-bound surrogate for one sequence, excluding the KL of
/// q(theta). Recurrence and Bernoulli terms use the PG (Jaakkola-Jordan)
/// bound at the stored tilts, with recurrence evaluated at zhat.
pub fn local_surrogate(shape: &Shape, ge: &GlobalExpectations, local: &LocalState, data: &Dataset) -> Result<f64> {
    let strat = shape.strategy();
    let qx = &local.qx;
    let mut lp = common_terms(shape, ge, local, data) + markov_row_term(shape, ge, local);
    if shape.sticks() > 0 {
        let wt = 1.0 / local.zhat.len() as f64;
        for (p, z) in local.zhat.iter().enumerate() {
            for t in 0..data.len() - 1 {
                let g = strat.group(z[t]);
                let (e_phi, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &strat.tail(z[t], shape.k));
                let (active, kappa) = strat.targets(z[t], z[t + 1], shape.k);
                for (s, r) in ge.recurrence[g].iter().enumerate() {
                    if active[s] > 0.0 {
                        let c = local.omega_tilt[p][t][s];
                        let om = local.omega[p][t][s];
                        lp += wt * jj_bound(c, om, kappa[s], r.mean.dot(&e_phi), expected_sq(r, &phi2));
                    }
                }
            }
        }
    }
    if let EmissionExpectations::Bernoulli(rows) = &ge.emission {
        let one = DVector::from_element(1, 1.0);
        for t in (0..data.len()).filter(|&t| data.mask[t]) {
            let (e_phi, phi2) = phi_moments(&qx.means[t], &qx.second_moment(t), &one);
            for (n, r) in rows.iter().enumerate() {
                let kappa = data.y[t][n] - 0.5;
                lp += jj_bound(
                    local.xi_tilt[t][n],
                    local.xi[t][n],
                    kappa,
                    r.mean.dot(&e_phi),
                    expected_sq(r, &phi2),
                );
            }
        }
    }
    Ok(lp + qx.entropy + local.qz_entropy)
}

/// Monte Carlo estimate of `E_q[ln p(z, x, y | theta)]` for one sequence.
/// Equals the exact log joint when every factor is a point mass.
pub fn expected_log_joint<R: Rng + ?Sized>(
    shape: &Shape,
    ge: &GlobalExpectations,
    local: &LocalState,
    data: &Dataset,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let qx = &local.qx;
    let mut lp = common_terms(shape, ge, local, data);
    if shape.sticks() > 0 {
        let elt = expected_log_transitions(shape, ge, qx, n_samples, rng);
        for (p, lt) in local.qz.pairwise.iter().zip(&elt) {
            lp += p
                .iter()
                .zip(lt.iter())
                .filter(|(q, _)| **q > 0.0)
                .map(|(q, l)| q * l)
                .sum::<f64>();
        }
    } else {
        lp += markov_row_term(shape, ge, local);
    }
    if let EmissionExpectations::Bernoulli(rows) = &ge.emission {
        let sds: Vec<DMatrix<f64>> = rows.iter().map(|r| cov_factor(&r.cov)).collect();
        let m = shape.m;
        for t in (0..data.len()).filter(|&t| data.mask[t]) {
            let l = cov_factor(&qx.covs[t]);
            let mut acc = 0.0;
            for _ in 0..n_samples {
                let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut phi = DVector::from_element(m + 1, 1.0);
                phi.rows_mut(0, m).copy_from(&(&qx.means[t] + &l * eps));
                for (n, (r, sd)) in rows.iter().zip(&sds).enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    let nu = r.mean.dot(&phi) + (sd * &phi).norm() * e;
                    acc += if data.y[t][n] > 0.5 {
                        log_sigmoid(nu)
                    } else {
                        log_sigmoid(-nu)
                    };
                }
            }
            lp += acc / n_samples as f64;
        }
    }
    Ok(lp)
}

// ---------------------------------------------------------------- driver

#[derive(Debug, Clone)]
pub struct VariationalState {
    pub shape: Shape,
    pub n: usize,
    pub prior: GlobalFactors,
    pub global: GlobalFactors,
    pub locals: Vec<LocalState>,
    pub permutation: Vec<usize>,
    pub iteration: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for (seed, iteration, sequence).
pub fn stream_rng(seed: u64, iteration: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(iteration as u64)) ^ stream))
}

const BATCH_STREAM: u64 = u64::MAX;
const ELBO_STREAM: u64 = u64::MAX - 1;

fn check_sequences(shape: &Shape, n: usize, family: EmissionFamily, data: &[Dataset]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("SVI needs at least one sequence".into()));
    }
    for d in data {
        d.validate()?;
        if d.dim() != n || d.family != family {
            return Err(Error::Dimension(
                "sequences disagree on output dimension or family".into(),
            ));
        }
        if d.len() < 2 {
            return Err(Error::InvalidParameter("sequences need at least two steps".into()));
        }
        if shape.strategy().observes_x() && d.mask.iter().any(|o| !o) {
            return Err(Error::Data(
                "rarhmm observes x directly and cannot fit masked steps".into(),
            ));
        }
    }
    Ok(())
}

impl VariationalState {
    /// Start from point estimates: locals are point masses at `paths`, and
    /// q(theta) is the conjugate update from those paths with the PG tilts
    /// evaluated at `params`.
    pub fn from_point(params: &ModelParams, paths: &[LatentPath], data: &[Dataset], hypers: &Hypers) -> Result<Self> {
        params.validate()?;
        let shape = Shape {
            variant: params.variant,
            k: params.k,
            m: params.m,
        };
        check_sequences(&shape, params.n, params.family(), data)?;
        if paths.len() != data.len() || paths.iter().zip(data).any(|(p, d)| p.len() != d.len()) {
            return Err(Error::Dimension(
                "one initial path per sequence, of matching length".into(),
            ));
        }
        let prior = GlobalFactors::prior(&shape, params.n, params.family(), hypers)?;
        let ge = GlobalExpectations::point(params)?;
        let mut locals = Vec::with_capacity(paths.len());
        let mut stats = prior.zeros_like();
        for (path, d) in paths.iter().zip(data) {
            let mut local = LocalState::point(path, shape.k);
            refresh_tilts(&shape, &ge, &mut local, d)?;
            stats.add(&local_stats(&shape, &prior, &local, d)?)?;
            locals.push(local);
        }
        let global = prior.affine(1.0, &stats, 1.0)?;
        global.expectations(&shape)?;
        Ok(Self {
            shape,
            n: params.n,
            prior,
            global,
            locals,
            permutation: params.permutation.clone(),
            iteration: 0,
        })
    }

    pub fn expectations(&self) -> Result<GlobalExpectations> {
        self.global.expectations(&self.shape)
    }

    pub fn mean_params(&self) -> Result<ModelParams> {
        self.global.mean_params(&self.shape, self.n, self.permutation.clone())
    }

    /// Surrogate bound summed over sequences, minus KL(q(theta) || p(theta)).
    pub fn surrogate_elbo(&self, data: &[Dataset]) -> Result<f64> {
        surrogate_elbo(self, data)
    }
}

pub fn surrogate_elbo(vs: &VariationalState, data: &[Dataset]) -> Result<f64> {
    let ge = vs.expectations()?;
    let mut total = -vs.global.kl(&vs.prior, &vs.shape)?;
    for (local, d) in vs.locals.iter().zip(data) {
        total += local_surrogate(&vs.shape, &ge, local, d)?;
    }
    Ok(total)
}

/// Monte Carlo ELBO: expected log joint plus the entropies of q(x) and q(z),
/// minus KL(q(theta) || p(theta)).
pub fn elbo_estimate<R: Rng + ?Sized>(
    vs: &VariationalState,
    data: &[Dataset],
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let ge = vs.expectations()?;
    let mut total = -vs.global.kl(&vs.prior, &vs.shape)?;
    for (local, d) in vs.locals.iter().zip(data) {
        total += expected_log_joint(&vs.shape, &ge, local, d, n_samples, rng)? + local.qx.entropy + local.qz_entropy;
    }
    Ok(total)
}

fn batch_local_steps(
    vs: &VariationalState,
    data: &[Dataset],
    cfg: &SviConfig,
    batch: &[usize],
    ge: &GlobalExpectations,
) -> Result<Vec<(LocalState, GlobalFactors)>> {
    batch
        .par_iter()
        .map(|&i| {
            let mut local = vs.locals[i].clone();
            let mut rng = stream_rng(cfg.seed, vs.iteration, i as u64);
            local_step(&vs.shape, ge, &mut local, &data[i], cfg, &mut rng)?;
            let stats = local_stats(&vs.shape, &vs.prior, &local, &data[i])?;
            Ok((local, stats))
        })
        .collect()
}

/// Minibatch indices for the current iteration, sorted.
pub fn choose_batch(vs: &VariationalState, cfg: &SviConfig) -> Vec<usize> {
    let n = vs.locals.len();
    if cfg.batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = stream_rng(cfg.seed, vs.iteration, BATCH_STREAM);
    let mut ids = rand::seq::index::sample(&mut rng, n, cfg.batch_size).into_vec();
    ids.sort_unstable();
    ids
}

/// One SVI iteration on `batch`: local steps, then a natural-gradient step
/// on q(theta). Returns the step size used.
pub fn svi_step(vs: &mut VariationalState, data: &[Dataset], cfg: &SviConfig, batch: &[usize]) -> Result<f64> {
    if batch.is_empty() || batch.iter().any(|&i| i >= vs.locals.len()) {
        return Err(Error::InvalidParameter("minibatch indices out of range".into()));
    }
    let ge = vs.expectations()?;
    let results = batch_local_steps(vs, data, cfg, batch, &ge)?;
    let mut stats = vs.prior.zeros_like();
    for (_, s) in &results {
        stats.add(s)?;
    }
    let rho = cfg.step_size(vs.iteration);
    let scale = vs.locals.len() as f64 / batch.len() as f64;
    let global = update_qtheta(&vs.global, &vs.prior, &stats, rho, scale)?;
    global.expectations(&vs.shape)?;
    vs.global = global;
    for (&i, (local, _)) in batch.iter().zip(results) {
        vs.locals[i] = local;
    }
    vs.iteration += 1;
    Ok(rho)
}

/// Batch coordinate ascent: every local factor, then the exact q(theta)
/// update `prior + stats`.
pub fn coordinate_ascent_step(vs: &mut VariationalState, data: &[Dataset], cfg: &SviConfig) -> Result<()> {
    let ge = vs.expectations()?;
    let mut stats = vs.prior.zeros_like();
    for i in 0..vs.locals.len() {
        let mut rng = stream_rng(cfg.seed, vs.iteration, i as u64);
        local_step(&vs.shape, &ge, &mut vs.locals[i], &data[i], cfg, &mut rng)?;
        stats.add(&local_stats(&vs.shape, &vs.prior, &vs.locals[i], &data[i])?)?;
    }
    let global = vs.prior.affine(1.0, &stats, 1.0)?;
    global.expectations(&vs.shape)?;
    vs.global = global;
    vs.iteration += 1;
    Ok(())
}

/// One line of the ELBO trace.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ElboRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub step_size: f64,
    pub minibatch_ids: Vec<usize>,
}

impl ElboRecord {
    pub const CSV_HEADER: &'static str = "iteration,elbo,step_size,minibatch_ids";

    pub fn csv_line(&self) -> String {
        let ids: Vec<String> = self.minibatch_ids.iter().map(|i| i.to_string()).collect();
        format!("{},{},{},{}", self.iteration, self.elbo, self.step_size, ids.join(";"))
    }
}

/// Run `cfg.n_iters` SVI iterations, recording a Monte Carlo ELBO after each.
pub fn run_svi<F>(vs: &mut VariationalState, data: &[Dataset], cfg: &SviConfig, mut on_iter: F) -> Result<()>
where
    F: FnMut(&VariationalState, &ElboRecord) -> Result<()>,
{
    cfg.validate()?;
    check_sequences(&vs.shape, vs.n, vs.prior_family(), data)?;
    if data.len() != vs.locals.len() {
        return Err(Error::Dimension("one dataset per local factor".into()));
    }
    for _ in 0..cfg.n_iters {
        let batch = choose_batch(vs, cfg);
        let rho = svi_step(vs, data, cfg, &batch)?;
        let mut rng = stream_rng(cfg.seed, vs.iteration, ELBO_STREAM);
        let elbo = elbo_estimate(vs, data, cfg.mc_samples, &mut rng)?;
        let rec = ElboRecord {
            iteration: vs.iteration,
            elbo,
            step_size: rho,
            minibatch_ids: batch,
        };
        on_iter(vs, &rec)?;
    }
    Ok(())
}

impl VariationalState {
    fn prior_family(&self) -> EmissionFamily {
        match &self.prior.emission {
            EmissionFactor::Bernoulli(_) => EmissionFamily::Bernoulli,
            _ => EmissionFamily::Gaussian,
        }
    }
}
