//! Blocked Gibbs sampler over (omega, xi, x, z, theta).
//!
//! A sweep updates, in order: the transition augmentation omega, the
//! Bernoulli augmentation xi, the continuous path x by FFBS, the discrete
//! path z by FFBS (with omega redrawn for the new z, since the z step
//! integrates omega out), and finally every parameter block.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::distributions::{
    mniw_posterior_stats, sample_mniw, sample_pg, sample_pg1, MniwExpectations, MniwParams, MniwStats, PolyaGammaParams,
};
use crate::error::{Error, Result};
use crate::linalg::{augment_one, cholesky, mvn_logpdf, mvn_logpdf_chol, sample_info};
use crate::messages::{ffbs_continuous, ffbs_discrete, DiscreteChain, GaussianChain, PairPotential};
use crate::model::{
    sample_markov_posterior, Dataset, Dynamics, Emission, EmissionFamily, Hypers, LatentPath, MarkovRows, ModelParams,
};
use crate::potentials::{gaussian_evidence, initial_prior};
use crate::stickbreak::{log_sigmoid, logistic_potential};

/// PG variables. `omega[t]` belongs to the transition t -> t+1 and `xi[t]`
/// to the outputs at t (empty unless emissions are Bernoulli).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationState {
    pub omega: Vec<DVector<f64>>,
    pub kappa: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
}

/// Which blocks a sweep updates. Tests freeze blocks to isolate them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    pub omega: bool,
    pub xi: bool,
    pub x: bool,
    pub z: bool,
    pub dynamics: bool,
    pub emission: bool,
    pub recurrence: bool,
    pub markov: bool,
}

impl Blocks {
    pub fn all() -> Self {
        Self {
            omega: true,
            xi: true,
            x: true,
            z: true,
            dynamics: true,
            emission: true,
            recurrence: true,
            markov: true,
        }
    }

    pub fn none() -> Self {
        Self {
            omega: false,
            xi: false,
            x: false,
            z: false,
            dynamics: false,
            emission: false,
            recurrence: false,
            markov: false,
        }
    }

    /// Latent blocks only; parameters stay fixed.
    pub fn latents() -> Self {
        Self {
            dynamics: false,
            emission: false,
            recurrence: false,
            markov: false,
            ..Self::all()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_iters: usize,
    pub thinning: usize,
    pub blocks: Blocks,
    pub hypers: Hypers,
}

impl SamplerConfig {
    pub fn new(n_iters: usize, hypers: Hypers) -> Result<Self> {
        if n_iters == 0 {
            return Err(Error::InvalidParameter("n_iters must be at least 1".into()));
        }
        Ok(Self {
            n_iters,
            thinning: 1,
            blocks: Blocks::all(),
            hypers,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GibbsState {
    pub params: ModelParams,
    pub path: LatentPath,
    pub aug: AugmentationState,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl GibbsState {
    /// Start a chain at `(params, path)`. The augmentation is drawn from its
    /// conditional so the state is consistent from the outset.
    pub fn new(params: ModelParams, path: LatentPath, data: &Dataset, seed: u64) -> Result<Self> {
        params.validate()?;
        check_inputs(&params, &path, data)?;
        let mut state = Self {
            params,
            path,
            aug: AugmentationState::default(),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        state.aug = AugmentationState {
            omega: Vec::new(),
            kappa: Vec::new(),
            xi: vec![DVector::zeros(0); data.len()],
        };
        resample_omega(&mut state)?;
        if data.family == EmissionFamily::Bernoulli {
            resample_xi(&mut state, data)?;
        }
        Ok(state)
    }
}

fn check_inputs(params: &ModelParams, path: &LatentPath, data: &Dataset) -> Result<()> {
    data.validate()?;
    if path.z.len() != data.len() || path.x.len() != data.len() || data.is_empty() {
        return Err(Error::Dimension(format!(
            "path of length {} / {} for {} observations",
            path.z.len(),
            path.x.len(),
            data.len()
        )));
    }
    if path.z.iter().any(|&z| z >= params.k) {
        return Err(Error::Dimension("discrete state out of range".into()));
    }
    if path.x.iter().any(|x| x.len() != params.m) {
        return Err(Error::Dimension(format!(
            "continuous states must have {} entries",
            params.m
        )));
    }
    if data.dim() != params.n {
        return Err(Error::Dimension(format!(
            "data has {} outputs, model expects {}",
            data.dim(),
            params.n
        )));
    }
    if data.family != params.family() {
        return Err(Error::InvalidParameter(format!(
            "{} data for a {} model",
            data.family.name(),
            params.family().name()
        )));
    }
    if params.strategy().observes_x() && data.mask.iter().any(|m| !m) {
        return Err(Error::Data(
            "rarhmm observes x directly and cannot fit masked steps".into(),
        ));
    }
    Ok(())
}

/// One full sweep in the order omega -> xi -> x -> z -> theta.
pub fn sweep(state: &mut GibbsState, data: &Dataset, config: &SamplerConfig) -> Result<()> {
    let b = config.blocks;
    if b.omega {
        resample_omega(state)?;
    }
    if b.xi && data.family == EmissionFamily::Bernoulli {
        resample_xi(state, data)?;
    }
    if b.x {
        if state.params.strategy().observes_x() {
            state.path.x = data.y.clone();
        } else {
            let chain = continuous_chain(&state.params, &state.path.z, &state.aug, data)?;
            state.path.x = ffbs_continuous(&chain, &mut state.rng)?;
        }
    }
    if b.z {
        let chain = discrete_chain(&state.params, &state.path.x)?;
        state.path.z = ffbs_discrete(&chain, &mut state.rng)?;
        // the z step marginalized omega; redraw it for the new path
        resample_omega(state)?;
    }
    let h = &config.hypers;
    if b.dynamics {
        state.params.dynamics = update_dynamics(&state.params, &state.path, &h.dynamics, &mut state.rng)?;
    }
    if b.emission && !state.params.strategy().observes_x() {
        state.params.emission = update_emissions(&state.params, &state.path, data, &state.aug, h, &mut state.rng)?;
    }
    if b.recurrence {
        state.params.transitions.weights =
            update_recurrence(&state.params, &state.path, &state.aug, h, &mut state.rng)?;
    }
    if b.markov {
        state.params.transitions.rows = update_markov(&state.params, &state.path, h.alpha, &mut state.rng)?;
    }
    state.iteration += 1;
    Ok(())
}

fn resample_omega(state: &mut GibbsState) -> Result<()> {
    let params = &state.params;
    let strat = params.strategy();
    let t_len = state.path.len();
    let mut omega = Vec::with_capacity(t_len.saturating_sub(1));
    let mut kappa = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let (zp, zn) = (state.path.z[t], state.path.z[t + 1]);
        let nu = params.logits(zp, &state.path.x[t]);
        let (active, k) = strat.targets(zp, zn, params.k);
        let mut w = DVector::zeros(nu.len());
        for s in 0..nu.len() {
            w[s] = sample_pg(PolyaGammaParams::new(active[s], nu[s])?, &mut state.rng)?;
        }
        omega.push(w);
        kappa.push(k);
    }
    state.aug.omega = omega;
    state.aug.kappa = kappa;
    Ok(())
}

fn resample_xi(state: &mut GibbsState, data: &Dataset) -> Result<()> {
    let (c, d) = state
        .params
        .emission
        .weights()
        .ok_or_else(|| Error::InvalidParameter("Bernoulli data needs a GLM emission".into()))?;
    state.aug.xi = (0..data.len())
        .map(|t| {
            if !data.mask[t] {
                return DVector::zeros(0);
            }
            let nu = c * &state.path.x[t] + d;
            nu.map(|v| sample_pg1(v, &mut state.rng))
        })
        .collect();
    Ok(())
}

/// Point-mass expectations for each state's dynamics.
pub fn dynamics_pairs(params: &ModelParams) -> Result<Vec<PairPotential>> {
    params
        .dynamics
        .iter()
        .map(|d| {
            Ok(PairPotential::from_expectations(&MniwExpectations::point(
                &d.weights(),
                &d.q,
            )?))
        })
        .collect()
}

/// p(x | z, omega, xi, y, theta) as a chain of information-form factors.
pub fn continuous_chain(
    params: &ModelParams,
    z: &[usize],
    aug: &AugmentationState,
    data: &Dataset,
) -> Result<GaussianChain> {
    let t_len = z.len();
    let m = params.m;
    let mut chain = GaussianChain::new(t_len, m);
    chain.nodes[0] = initial_prior(m);
    match &params.emission {
        Emission::Gaussian { c, d, s } => {
            let mut w = DMatrix::zeros(params.n, m + 1);
            w.columns_mut(0, m).copy_from(c);
            w.column_mut(m).copy_from(d);
            let e = MniwExpectations::point(&w, s)?;
            for t in 0..t_len {
                if data.mask[t] {
                    chain.nodes[t].multiply_in_place(&gaussian_evidence(&e, &data.y[t]));
                }
            }
        }
        Emission::Bernoulli { c, d } => {
            for t in 0..t_len {
                if data.mask[t] {
                    let kappa = data.y[t].map(|v| v - 0.5);
                    let f = logistic_potential(c, d, &aug.xi[t], &kappa)?;
                    chain.nodes[t].multiply_in_place(&f);
                }
            }
        }
        Emission::Identity => {}
    }
    let pairs = dynamics_pairs(params)?;
    let has_sticks = params.strategy().layout(params.k, m).sticks > 0;
    for t in 0..t_len.saturating_sub(1) {
        if has_sticks {
            let (wx, off) = params.stick_affine(z[t]);
            let f = logistic_potential(&wx, &off, &aug.omega[t], &aug.kappa[t])?;
            chain.nodes[t].multiply_in_place(&f);
        }
        chain.pairs[t] = pairs[z[t + 1]].clone();
    }
    Ok(chain)
}

/// p(z | x, theta): `P_t[i, j] = ln p(z_{t+1}=j | z_t=i, x_t) + ln N(x_{t+1}; A_j x_t + b_j, Q_j)`.
pub fn discrete_chain(params: &ModelParams, x: &[DVector<f64>]) -> Result<DiscreteChain> {
    let k = params.k;
    let chols = params
        .dynamics
        .iter()
        .map(|d| cholesky(&d.q, "dynamics noise"))
        .collect::<Result<Vec<_>>>()?;
    let log_trans = (0..x.len().saturating_sub(1))
        .map(|t| {
            let dyn_ll: Vec<f64> = (0..k)
                .map(|j| {
                    let d = &params.dynamics[j];
                    mvn_logpdf_chol(&x[t + 1], &d.mean(&x[t]), &chols[j])
                })
                .collect();
            let mut lt = DMatrix::zeros(k, k);
            for i in 0..k {
                let lp = params.log_trans_probs(i, &x[t]);
                for j in 0..k {
                    lt[(i, j)] = lp[j] + dyn_ll[j];
                }
            }
            lt
        })
        .collect();
    Ok(DiscreteChain {
        log_init: DVector::from_element(k, -(k as f64).ln()),
        log_trans,
        log_unary: None,
    })
}

/// Dynamics regression statistics for each state: `[x_t; 1] -> x_{t+1}`
/// over steps with `z_{t+1} = k`.
pub fn dynamics_stats(path: &LatentPath, k: usize, m: usize) -> Vec<MniwStats> {
    let mut stats = vec![MniwStats::zeros(m, m + 1); k];
    for t in 0..path.len().saturating_sub(1) {
        stats[path.z[t + 1]].add_row(&augment_one(&path.x[t]), &path.x[t + 1], 1.0);
    }
    stats
}

/// MNIW posterior draw of `(A_k, b_k, Q_k)`; states with no steps draw from the prior.
pub fn update_dynamics<R: Rng + ?Sized>(
    params: &ModelParams,
    path: &LatentPath,
    prior: &MniwParams,
    rng: &mut R,
) -> Result<Vec<Dynamics>> {
    dynamics_stats(path, params.k, params.m)
        .iter()
        .map(|s| {
            let post = mniw_posterior_stats(prior, s)?;
            let (w, q) = sample_mniw(&post, rng)?;
            Ok(Dynamics::from_weights(&w, q))
        })
        .collect()
}

/// Emission update: MNIW draw for Gaussian outputs, or one Gaussian draw
/// per output row given xi for Bernoulli outputs.
pub fn update_emissions<R: Rng + ?Sized>(
    params: &ModelParams,
    path: &LatentPath,
    data: &Dataset,
    aug: &AugmentationState,
    hypers: &Hypers,
    rng: &mut R,
) -> Result<Emission> {
    let m = params.m;
    match &params.emission {
        Emission::Gaussian { .. } => {
            let mut stats = MniwStats::zeros(params.n, m + 1);
            for t in 0..data.len() {
                if data.mask[t] {
                    stats.add_row(&augment_one(&path.x[t]), &data.y[t], 1.0);
                }
            }
            let post = mniw_posterior_stats(&hypers.emission, &stats)?;
            let (w, s) = sample_mniw(&post, rng)?;
            Ok(Emission::Gaussian {
                c: w.columns(0, m).into_owned(),
                d: w.column(m).into_owned(),
                s,
            })
        }
        Emission::Bernoulli { .. } => {
            let f = m + 1;
            let prior_prec = 1.0 / hypers.bernoulli_var;
            let mut w = DMatrix::zeros(params.n, f);
            let phis: Vec<_> = path.x.iter().map(augment_one).collect();
            for nrow in 0..params.n {
                let mut j = DMatrix::identity(f, f) * prior_prec;
                let mut h = DVector::zeros(f);
                for t in 0..data.len() {
                    if data.mask[t] {
                        j.ger(aug.xi[t][nrow], &phis[t], &phis[t], 1.0);
                        h.axpy(data.y[t][nrow] - 0.5, &phis[t], 1.0);
                    }
                }
                let row = sample_info(&j, &h, rng)?;
                w.row_mut(nrow).copy_from(&row.transpose());
            }
            Ok(Emission::Bernoulli {
                c: w.columns(0, m).into_owned(),
                d: w.column(m).into_owned(),
            })
        }
        Emission::Identity => Ok(Emission::Identity),
    }
}

/// Per-group, per-stick precision and linear terms of the augmented
/// recurrence likelihood, `sum_t omega phi phi^T` and `sum_t kappa phi`.
pub fn recurrence_stats(
    params: &ModelParams,
    path: &LatentPath,
    aug: &AugmentationState,
) -> Vec<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let strat = params.strategy();
    let layout = strat.layout(params.k, params.m);
    let f = layout.features;
    let mut stats = vec![vec![(DMatrix::zeros(f, f), DVector::zeros(f)); layout.sticks]; layout.groups];
    for t in 0..path.len().saturating_sub(1) {
        let zp = path.z[t];
        let g = strat.group(zp);
        let phi = params.features(zp, &path.x[t]);
        for s in 0..layout.sticks {
            let (j, h) = &mut stats[g][s];
            if aug.omega[t][s] != 0.0 {
                j.ger(aug.omega[t][s], &phi, &phi, 1.0);
            }
            if aug.kappa[t][s] != 0.0 {
                h.axpy(aug.kappa[t][s], &phi, 1.0);
            }
        }
    }
    stats
}

/// Gaussian draw of every stick-weight row given omega. Rows are a priori
/// independent with covariance `recurrence_var * I` around the variant mean.
pub fn update_recurrence<R: Rng + ?Sized>(
    params: &ModelParams,
    path: &LatentPath,
    aug: &AugmentationState,
    hypers: &Hypers,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    let strat = params.strategy();
    let layout = strat.layout(params.k, params.m);
    let mean = strat.weight_prior_mean(params.k, params.m);
    let prec = 1.0 / hypers.recurrence_var;
    let stats = recurrence_stats(params, path, aug);
    let mut out = Vec::with_capacity(layout.groups);
    for group in &stats {
        let mut w = DMatrix::zeros(layout.sticks, layout.features);
        for (s, (j, h)) in group.iter().enumerate() {
            let mut jp = j.clone();
            for i in 0..layout.features {
                jp[(i, i)] += prec;
            }
            let hp = h + mean.row(s).transpose() * prec;
            w.row_mut(s).copy_from(&sample_info(&jp, &hp, rng)?.transpose());
        }
        out.push(w);
    }
    Ok(out)
}

pub fn transition_counts(path: &LatentPath, k: usize) -> DMatrix<f64> {
    let mut counts = DMatrix::zeros(k, k);
    for t in 0..path.len().saturating_sub(1) {
        counts[(path.z[t], path.z[t + 1])] += 1.0;
    }
    counts
}

/// Dirichlet draws of pi rows (Markov) or pi_tilde rows (sticky, where
/// self-transitions do not count).
pub fn update_markov<R: Rng + ?Sized>(
    params: &ModelParams,
    path: &LatentPath,
    alpha: f64,
    rng: &mut R,
) -> Result<Option<DMatrix<f64>>> {
    let kind = params.strategy().markov_rows();
    if kind == MarkovRows::None {
        return Ok(None);
    }
    let counts = transition_counts(path, params.k);
    sample_markov_posterior(kind, params.k, alpha, &counts, rng)
}

/// ln p(z, x, y | theta) over observed steps.
pub fn score_joint(params: &ModelParams, path: &LatentPath, data: &Dataset) -> Result<f64> {
    let t_len = path.len();
    if t_len == 0 || data.len() != t_len {
        return Err(Error::Dimension("path and data lengths differ".into()));
    }
    let m = params.m;
    let mut lp = -(params.k as f64).ln() + mvn_logpdf(&path.x[0], &DVector::zeros(m), &DMatrix::identity(m, m))?;
    for t in 0..t_len - 1 {
        lp += params.log_trans_probs(path.z[t], &path.x[t])[path.z[t + 1]];
        let d = &params.dynamics[path.z[t + 1]];
        lp += mvn_logpdf(&path.x[t + 1], &d.mean(&path.x[t]), &d.q)?;
    }
    for t in 0..t_len {
        if data.mask[t] {
            lp += emission_loglik(params, &path.x[t], &data.y[t])?;
        }
    }
    Ok(lp)
}

/// ln p(y_t | x_t, theta).
pub fn emission_loglik(params: &ModelParams, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    match &params.emission {
        Emission::Gaussian { c, d, s } => mvn_logpdf(y, &(c * x + d), s),
        Emission::Bernoulli { c, d } => {
            let nu = c * x + d;
            Ok(nu
                .iter()
                .zip(y.iter())
                .map(|(v, yv)| if *yv > 0.5 { log_sigmoid(*v) } else { log_sigmoid(-*v) })
                .sum())
        }
        Emission::Identity => Ok(0.0),
    }
}

/// One line of the sample trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Run-length encoded path as `[state, run length]` pairs.
    pub z: Vec<[usize; 2]>,
    pub log_joint: f64,
    pub params_digest: String,
}

pub fn run_length_encode(z: &[usize]) -> Vec<[usize; 2]> {
    let mut out: Vec<[usize; 2]> = Vec::new();
    for &s in z {
        match out.last_mut() {
            Some(last) if last[0] == s => last[1] += 1,
            _ => out.push([s, 1]),
        }
    }
    out
}

/// Short SHA-256 digest of the parameter document.
pub fn params_digest(params: &ModelParams) -> String {
    let text = params.to_json().to_string();
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

impl TraceRecord {
    pub fn capture(state: &GibbsState, data: &Dataset) -> Self {
        Self {
            iteration: state.iteration,
            z: run_length_encode(&state.path.z),
            log_joint: score_joint(&state.params, &state.path, data).unwrap_or(f64::NAN),
            params_digest: params_digest(&state.params),
        }
    }
}

/// Run `config.n_iters` sweeps, calling `on_sample` after every `thinning`-th.
pub fn run<F>(state: &mut GibbsState, data: &Dataset, config: &SamplerConfig, mut on_sample: F) -> Result<()>
where
    F: FnMut(&GibbsState) -> Result<()>,
{
    check_inputs(&state.params, &state.path, data)?;
    let thin = config.thinning.max(1);
    for _ in 0..config.n_iters {
        sweep(state, data, config)?;
        if state.iteration.is_multiple_of(thin) {
            on_sample(state)?;
        }
    }
    Ok(())
}
