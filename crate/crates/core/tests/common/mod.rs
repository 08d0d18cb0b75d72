//! Brute-force oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rslds::gibbs::{continuous_chain, discrete_chain, GibbsState};
use rslds::messages::{DiscreteChain, GaussianChain};
use rslds::model::{sample_prior, simulate, EmissionFamily, Hypers, VariantTag};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// The chain as one joint Gaussian: precision, potential and the constant
/// term of the log density.
pub fn dense_form(chain: &GaussianChain) -> (DMatrix<f64>, DVector<f64>, f64) {
    let t_len = chain.nodes.len();
    let m = chain.nodes[0].h.len();
    let d = t_len * m;
    let mut j = DMatrix::zeros(d, d);
    let mut h = DVector::zeros(d);
    let mut c = 0.0;
    for (t, n) in chain.nodes.iter().enumerate() {
        let mut b = j.view_mut((t * m, t * m), (m, m));
        b += &n.j;
        let mut hv = h.rows_mut(t * m, m);
        hv += &n.h;
        c -= n.log_normalizer;
    }
    for (t, p) in chain.pairs.iter().enumerate() {
        let (a, b) = (t * m, (t + 1) * m);
        let mut v = j.view_mut((a, a), (m, m));
        v += &p.j11;
        let mut v = j.view_mut((b, b), (m, m));
        v += &p.j22;
        let mut v = j.view_mut((a, b), (m, m));
        v += &p.j12;
        let mut v = j.view_mut((b, a), (m, m));
        v += p.j12.transpose();
        let mut hv = h.rows_mut(a, m);
        hv += &p.h1;
        let mut hv = h.rows_mut(b, m);
        hv += &p.h2;
        c -= p.log_normalizer;
    }
    (j, h, c)
}

pub struct DenseMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_partition: f64,
    pub entropy: f64,
}

pub fn dense_moments(chain: &GaussianChain) -> DenseMoments {
    let (j, h, c) = dense_form(chain);
    let d = h.len() as f64;
    let chol = j.clone().cholesky().expect("joint precision is positive definite");
    let cov = chol.inverse();
    let mean = &cov * &h;
    let log_det_j: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    DenseMoments {
        log_partition: c + 0.5 * h.dot(&mean) + 0.5 * d * LN_2PI - 0.5 * log_det_j,
        entropy: 0.5 * d * (1.0 + LN_2PI) - 0.5 * log_det_j,
        mean,
        cov,
    }
}

/// Every path of a discrete chain with its log weight.
pub fn enumerate_paths(chain: &DiscreteChain) -> Vec<(Vec<usize>, f64)> {
    let k = chain.log_init.len();
    let t_len = chain.log_trans.len() + 1;
    let mut out = Vec::with_capacity(k.pow(t_len as u32));
    let mut z = vec![0usize; t_len];
    loop {
        let mut lw = chain.log_init[z[0]];
        for t in 0..t_len {
            if let Some(u) = &chain.log_unary {
                lw += u[t][z[t]];
            }
            if t + 1 < t_len {
                lw += chain.log_trans[t][(z[t], z[t + 1])];
            }
        }
        out.push((z.clone(), lw));
        let mut i = 0;
        loop {
            if i == t_len {
                return out;
            }
            z[i] += 1;
            if z[i] < k {
                break;
            }
            z[i] = 0;
            i += 1;
        }
    }
}

pub struct Enumerated {
    pub log_partition: f64,
    pub unary: Vec<DVector<f64>>,
    pub pairwise: Vec<DMatrix<f64>>,
    pub map: Vec<usize>,
}

pub fn enumerate_marginals(chain: &DiscreteChain) -> Enumerated {
    let k = chain.log_init.len();
    let t_len = chain.log_trans.len() + 1;
    let paths = enumerate_paths(chain);
    let mx = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = paths.iter().map(|p| (p.1 - mx).exp()).sum();
    let mut unary = vec![DVector::zeros(k); t_len];
    let mut pairwise = vec![DMatrix::zeros(k, k); t_len - 1];
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for (z, lw) in &paths {
        let w = (lw - mx).exp() / total;
        for t in 0..t_len {
            unary[t][z[t]] += w;
            if t + 1 < t_len {
                pairwise[t][(z[t], z[t + 1])] += w;
            }
        }
        if *lw > best.0 {
            best = (*lw, z.clone());
        }
    }
    Enumerated {
        log_partition: mx + total.ln(),
        unary,
        pairwise,
        map: best.1,
    }
}

/// A random small model together with its two conditional chains.
pub struct Spec {
    pub variant: VariantTag,
    pub t_len: usize,
    pub k: usize,
    pub m: usize,
    pub continuous: GaussianChain,
    pub discrete: DiscreteChain,
}

pub fn random_spec(seed: u64) -> Spec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants = [
        VariantTag::StandardSlds,
        VariantTag::RecurrentSlds,
        VariantTag::SharedRslds,
        VariantTag::RecurrenceOnly,
        VariantTag::RecurrentSticky,
    ];
    let variant = variants[rng.random_range(0..variants.len())];
    let t_len = rng.random_range(2..=6);
    let m = rng.random_range(1..=3);
    let k_min = if variant == VariantTag::RecurrentSticky { 2 } else { 1 };
    let k = rng.random_range(k_min..=3);
    let n = rng.random_range(1..=3);
    let family = if rng.random::<bool>() {
        EmissionFamily::Gaussian
    } else {
        EmissionFamily::Bernoulli
    };
    let hypers = Hypers::default_for(m, n).unwrap();
    let params = sample_prior(&hypers, k, m, n, variant, family, &mut rng).unwrap();
    let (path, mut data) = simulate(&params, t_len, None, &mut rng).unwrap();
    if t_len > 3 && rng.random::<bool>() {
        data.mask_interval(1, 2).unwrap();
    }
    let state = GibbsState::new(params.clone(), path.clone(), &data, seed).unwrap();
    Spec {
        variant,
        t_len,
        k,
        m,
        continuous: continuous_chain(&params, &path.z, &state.aug, &data).unwrap(),
        discrete: discrete_chain(&params, &path.x).unwrap(),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Three Gaussian clusters strung along a random line with shuffled labels.
pub fn three_clusters(seed: u64) -> (Vec<DVector<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = DVector::from_vec(vec![angle.cos(), angle.sin()]);
    let offset = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
    let mut labels = vec![0, 1, 2];
    labels.shuffle(&mut rng);
    let mut pos = 0.0;
    let (mut x, mut z) = (Vec::new(), Vec::new());
    for &label in &labels {
        pos += rng.random_range(3.0..6.0);
        for _ in 0..rng.random_range(30..80) {
            let noise = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            x.push(&offset + &dir * pos + noise);
            z.push(label);
        }
    }
    (x, z)
}

/// Output order maximizing the sequential log likelihood over all K!
/// orders. Ties go to the first order found.
pub fn exhaustive_order(x: &[DVector<f64>], z: &[usize], k: usize, prec: f64) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..k).collect();
    permutations(&mut order, 0, &mut |o| {
        let ll = rslds::init::sequential_loglik(x, z, o, prec).unwrap();
        if ll > best.1 + 1e-9 {
            best = (o.to_vec(), ll);
        }
    });
    best
}

fn permutations(v: &mut Vec<usize>, i: usize, f: &mut dyn FnMut(&[usize])) {
    if i == v.len() {
        f(v);
        return;
    }
    for j in i..v.len() {
        v.swap(i, j);
        permutations(v, i + 1, f);
        v.swap(i, j);
    }
}
