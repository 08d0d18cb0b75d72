//! End-to-end fitting: initialization, then Gibbs chains or SVI.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gibbs::{run, GibbsState, SamplerConfig, TraceRecord};
use crate::init::{initialize, InitConfig, InitResult};
use crate::model::{Dataset, Emission, EmissionFamily, Hypers, LatentPath, ModelParams, VariantTag};
use crate::stickbreak::sigmoid;
use crate::svi::{run_svi, ElboRecord, EmissionExpectations, SviConfig, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inference {
    Gibbs,
    Svi,
}

impl Inference {
    pub fn name(self) -> &'static str {
        match self {
            Inference::Gibbs => "gibbs",
            Inference::Svi => "svi",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gibbs" => Ok(Inference::Gibbs),
            "svi" => Ok(Inference::Svi),
            other => Err(Error::InvalidParameter(format!("unknown inference method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub variant: VariantTag,
    pub k: usize,
    pub m: usize,
    pub inference: Inference,
    /// Gibbs sweeps or SVI iterations.
    pub iters: usize,
    pub seed: u64,
    /// Independent Gibbs chains, run in parallel. SVI uses one.
    pub chains: usize,
    /// Record every `thinning`-th Gibbs sample.
    pub thinning: usize,
    pub hypers: Hypers,
    pub init: InitConfig,
    /// SVI settings; `n_iters` and `seed` are taken from this config.
    pub svi: SviConfig,
}

impl FitConfig {
    pub fn new(
        variant: VariantTag,
        k: usize,
        m: usize,
        n: usize,
        inference: Inference,
        iters: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            variant,
            k,
            m,
            inference,
            iters,
            seed,
            chains: 1,
            thinning: 1,
            hypers: Hypers::default_for(m, n)?,
            init: InitConfig {
                seed,
                ..InitConfig::default()
            },
            svi: SviConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.chains == 0 || self.thinning == 0 {
            return Err(Error::InvalidParameter(
                "iterations, chains and thinning must be at least 1".into(),
            ));
        }
        if self.k == 0 || self.m == 0 {
            return Err(Error::InvalidParameter("K and M must be positive".into()));
        }
        Ok(())
    }
}

/// Seed of chain `c`, derived from the run seed.
pub fn chain_seed(seed: u64, c: usize) -> u64 {
    let mut z = seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct ChainFit {
    pub seed: u64,
    /// Gibbs sample trace (empty for SVI).
    pub samples: Vec<TraceRecord>,
    /// ELBO trace (empty for Gibbs).
    pub elbo: Vec<ElboRecord>,
    /// Final sample, or posterior means for SVI.
    pub params: ModelParams,
    pub path: LatentPath,
    /// Most frequent state at each step over the second half of the run
    /// (argmax of q(z) for SVI).
    pub z_mode: Vec<usize>,
    /// Posterior mean event probabilities, Bernoulli outputs only.
    pub rho: Option<Vec<DVector<f64>>>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub init: InitResult,
    pub chains: Vec<ChainFit>,
}

impl FitOutput {
    /// Event probabilities averaged over chains.
    pub fn pooled_rho(&self) -> Option<Vec<DVector<f64>>> {
        let first = self.chains.first()?.rho.as_ref()?;
        let mut acc = first.clone();
        for c in &self.chains[1..] {
            for (a, r) in acc.iter_mut().zip(c.rho.as_ref()?) {
                *a += r;
            }
        }
        let n = self.chains.len() as f64;
        Some(acc.into_iter().map(|a| a / n).collect())
    }
}

pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitOutput> {
    cfg.validate()?;
    data.validate()?;
    let init = initialize(data, cfg.variant, cfg.k, cfg.m, &cfg.hypers, &cfg.init)?;
    let chains = match cfg.inference {
        Inference::Gibbs => (0..cfg.chains)
            .into_par_iter()
            .map(|c| gibbs_chain(data, cfg, &init, chain_seed(cfg.seed, c)))
            .collect::<Result<Vec<_>>>()?,
        Inference::Svi => vec![svi_fit(data, cfg, &init, chain_seed(cfg.seed, 0))?],
    };
    Ok(FitOutput { init, chains })
}

fn event_probs(params: &ModelParams, x: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
    match &params.emission {
        Emission::Bernoulli { c, d } => Some(x.iter().map(|xt| (c * xt + d).map(sigmoid)).collect()),
        _ => None,
    }
}

fn gibbs_chain(data: &Dataset, cfg: &FitConfig, init: &InitResult, seed: u64) -> Result<ChainFit> {
    let mut state = GibbsState::new(init.params.clone(), init.path.clone(), data, seed)?;
    let sampler = SamplerConfig::new(cfg.iters, cfg.hypers.clone())?;
    let t_len = data.len();
    let burn = cfg.iters / 2;
    let mut counts = vec![vec![0usize; cfg.k]; t_len];
    let mut rho_sum: Option<Vec<DVector<f64>>> = None;
    let mut kept = 0usize;
    let mut samples = Vec::new();
    run(&mut state, data, &sampler, |s| {
        if s.iteration % cfg.thinning == 0 {
            samples.push(TraceRecord::capture(s, data));
        }
        if s.iteration > burn {
            kept += 1;
            for (row, &z) in counts.iter_mut().zip(&s.path.z) {
                row[z] += 1;
            }
            if let Some(r) = event_probs(&s.params, &s.path.x) {
                match &mut rho_sum {
                    None => rho_sum = Some(r),
                    Some(acc) => acc.iter_mut().zip(&r).for_each(|(a, v)| *a += v),
                }
            }
        }
        Ok(())
    })?;
    let z_mode = counts
        .iter()
        .map(|row| (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
        .collect();
    Ok(ChainFit {
        seed,
        samples,
        elbo: Vec::new(),
        rho: rho_sum.map(|acc| acc.into_iter().map(|a| a / kept as f64).collect()),
        params: state.params,
        path: state.path,
        z_mode,
    })
}

fn svi_fit(data: &Dataset, cfg: &FitConfig, init: &InitResult, seed: u64) -> Result<ChainFit> {
    let datasets = std::slice::from_ref(data);
    let mut vs = VariationalState::from_point(&init.params, std::slice::from_ref(&init.path), datasets, &cfg.hypers)?;
    let svi = SviConfig {
        n_iters: cfg.iters,
        seed,
        ..cfg.svi.clone()
    };
    let mut elbo = Vec::new();
    run_svi(&mut vs, datasets, &svi, |_, r| {
        elbo.push(r.clone());
        Ok(())
    })?;
    let local = &vs.locals[0];
    let path = local.summary_path();
    let rho = if data.family == EmissionFamily::Bernoulli {
        let ge = vs.expectations()?;
        let EmissionExpectations::Bernoulli(rows) = &ge.emission else {
            return Err(Error::InvalidParameter(
                "Bernoulli data without Bernoulli emissions".into(),
            ));
        };
        // probit approximation to E[sigma(nu)] for Gaussian nu
        let m = cfg.m;
        Some(
            (0..data.len())
                .map(|t| {
                    let mut phi = DVector::from_element(m + 1, 1.0);
                    phi.rows_mut(0, m).copy_from(&local.qx.means[t]);
                    DVector::from_iterator(
                        rows.len(),
                        rows.iter().map(|r| {
                            let c = r.mean.rows(0, m);
                            let var = (c.transpose() * &local.qx.covs[t] * c)[0] + phi.dot(&(&r.cov * &phi));
                            sigmoid(r.mean.dot(&phi) / (1.0 + std::f64::consts::PI * var / 8.0).sqrt())
                        }),
                    )
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(ChainFit {
        seed,
        samples: Vec::new(),
        elbo,
        params: vs.mean_params()?,
        z_mode: path.z.clone(),
        path,
        rho,
    })
}
