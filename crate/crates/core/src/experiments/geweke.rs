//! Joint-distribution ("getting it right") test of the Gibbs sampler.
//!
//! Arm A draws (theta, z, x, y) independently from the generative model.
//! Arm B runs the sampler while re-simulating y from the current state
//! after every sweep, so its stationary law is the same joint. Scalar
//! probes of the two arms are compared with two-sample KS statistics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distributions::MniwParams;
use crate::error::Result;
use crate::gibbs::{sweep, GibbsState, SamplerConfig};
use crate::model::{
    emit, sample_prior, simulate, Dataset, EmissionFamily, Hypers, LatentPath, ModelParams, VariantTag,
};

#[derive(Debug, Clone)]
pub struct GewekeConfig {
    pub variant: VariantTag,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub t_len: usize,
    pub samples: usize,
    /// Sweeps between recorded samples of the sampler arm.
    pub thin: usize,
    pub burn_in: usize,
    pub hypers: Hypers,
    pub seed: u64,
}

impl GewekeConfig {
    /// Small rSLDS with moderately informative priors so the sampler arm
    /// mixes within a desk-scale budget.
    pub fn small(seed: u64) -> Result<Self> {
        let (k, m, n) = (2, 1, 1);
        let mut hypers = Hypers::default_for(m, n)?;
        hypers.recurrence_var = 1.0;
        hypers.dynamics = MniwParams::new(
            DMatrix::from_row_slice(1, 2, &[0.9, 0.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.1])),
            DMatrix::from_element(1, 1, 0.5),
            6.0,
        )?;
        hypers.emission = MniwParams::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.1])),
            DMatrix::from_element(1, 1, 1.0),
            6.0,
        )?;
        Ok(Self {
            variant: VariantTag::RecurrentSlds,
            k,
            m,
            n,
            t_len: 20,
            samples: 5000,
            thin: 30,
            burn_in: 200,
            hypers,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeComparison {
    pub name: String,
    pub ks: f64,
    pub forward_mean: f64,
    pub sampler_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GewekeReport {
    pub samples: usize,
    pub thin: usize,
    pub probes: Vec<ProbeComparison>,
}

impl GewekeReport {
    pub fn max_ks(&self) -> f64 {
        self.probes.iter().map(|p| p.ks).fold(0.0, f64::max)
    }
}

pub const PROBE_NAMES: [&str; 3] = ["dynamics_eig_re", "x_mean", "occupancy_state0"];

fn probes(params: &ModelParams, path: &LatentPath) -> [f64; 3] {
    let eig = params.dynamics[0]
        .a
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let t = path.len() as f64;
    let x_mean = path.x.iter().map(|x| x[0]).sum::<f64>() / t;
    let occ = path.z.iter().filter(|&&z| z == 0).count() as f64 / t;
    [eig, x_mean, occ]
}

fn resimulate(params: &ModelParams, path: &LatentPath, data: &mut Dataset, rng: &mut ChaCha8Rng) -> Result<()> {
    for t in 0..path.len() {
        data.y[t] = emit(params, path.z[t], &path.x[t], rng)?;
    }
    Ok(())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn run_geweke(cfg: &GewekeConfig) -> Result<GewekeReport> {
    let family = EmissionFamily::Gaussian;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut forward = vec![Vec::with_capacity(cfg.samples); 3];
    for _ in 0..cfg.samples {
        let params = sample_prior(&cfg.hypers, cfg.k, cfg.m, cfg.n, cfg.variant, family, &mut rng)?;
        let (path, _) = simulate(&params, cfg.t_len, None, &mut rng)?;
        for (f, p) in forward.iter_mut().zip(probes(&params, &path)) {
            f.push(p);
        }
    }

    let params = sample_prior(&cfg.hypers, cfg.k, cfg.m, cfg.n, cfg.variant, family, &mut rng)?;
    let (path, mut data) = simulate(&params, cfg.t_len, None, &mut rng)?;
    let mut state = GibbsState::new(params, path, &data, cfg.seed.wrapping_add(1))?;
    let config = SamplerConfig::new(1, cfg.hypers.clone())?;
    let mut sampler = vec![Vec::with_capacity(cfg.samples); 3];
    let step = |state: &mut GibbsState, data: &mut Dataset| -> Result<()> {
        sweep(state, data, &config)?;
        let mut r = state.rng.clone();
        resimulate(&state.params, &state.path, data, &mut r)?;
        state.rng = r;
        Ok(())
    };
    for _ in 0..cfg.burn_in {
        step(&mut state, &mut data)?;
    }
    for _ in 0..cfg.samples {
        for _ in 0..cfg.thin.max(1) {
            step(&mut state, &mut data)?;
        }
        for (s, p) in sampler.iter_mut().zip(probes(&state.params, &state.path)) {
            s.push(p);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let probes = PROBE_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| ProbeComparison {
            name: name.to_string(),
            ks: ks_statistic(&forward[i], &sampler[i]),
            forward_mean: mean(&forward[i]),
            sampler_mean: mean(&sampler[i]),
        })
        .collect();
    Ok(GewekeReport {
        samples: cfg.samples,
        thin: cfg.thin,
        probes,
    })
}
