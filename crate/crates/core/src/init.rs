//! Three-stage initialization: PPCA for the continuous path, an AR-HMM
//! for the discrete path and dynamics, and a greedy decision list that
//! orders the states for stick breaking and seeds the recurrence weights.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::distributions::{mniw_posterior_stats, MniwParams, MniwStats};
use crate::error::{Error, Result};
use crate::linalg::{augment_one, cholesky, mvn_logpdf_chol, symmetrize};
use crate::messages::{hmm_marginals, viterbi, DiscreteChain};
use crate::model::{
    Dataset, Dynamics, Emission, EmissionFamily, Hypers, LatentPath, MarkovRows, ModelParams, Transitions, VariantTag,
};
use crate::stickbreak::{log_sigmoid, sigmoid};

/// Bias of the constant-true predicate used for degenerate levels.
pub const CONST_TRUE_BIAS: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct InitConfig {
    pub arhmm_iters: usize,
    /// EM runs after the k-means-seeded one, each from a random blocky
    /// segmentation; the run with the best objective is kept.
    pub arhmm_restarts: usize,
    pub kmeans_restarts: usize,
    /// Width of the moving window used to smooth Bernoulli outputs.
    pub smoothing_window: usize,
    /// Half-width of the moving average applied to a Bernoulli x_init
    /// before segmentation. PPCA paths from binary data are noisy enough
    /// that the AR-HMM otherwise splits on noise. 0 disables.
    pub segment_halfwidth: usize,
    /// Prior precision of the MAP logistic regressions.
    pub logistic_prec: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            arhmm_iters: 50,
            arhmm_restarts: 0,
            kmeans_restarts: 5,
            smoothing_window: 5,
            segment_halfwidth: 6,
            logistic_prec: 1e-2,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------- PPCA

#[derive(Debug, Clone)]
pub struct Ppca {
    /// Posterior latent means; masked steps are interpolated.
    pub x: Vec<DVector<f64>>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub noise_var: f64,
    /// Maximized log likelihood of the observed rows.
    pub loglik: f64,
}

/// Maximum-likelihood PPCA of the observed rows by eigendecomposition.
pub fn ppca(ys: &[DVector<f64>], observed: &[bool], m: usize) -> Result<Ppca> {
    let rows: Vec<usize> = (0..ys.len()).filter(|&t| observed[t]).collect();
    let n_obs = rows.len();
    if n_obs < m || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "PPCA needs at least M={m} observed steps (got {n_obs})"
        )));
    }
    let n = ys[rows[0]].len();
    if m > n {
        return Err(Error::Dimension(format!("PPCA latent dim {m} exceeds data dim {n}")));
    }
    let nf = n_obs as f64;
    let d = rows.iter().fold(DVector::zeros(n), |a, &t| a + &ys[t]) / nf;
    let mut cov = DMatrix::zeros(n, n);
    for &t in &rows {
        let r = &ys[t] - &d;
        cov.ger(1.0 / nf, &r, &r, 1.0);
    }
    let eig = SymmetricEigen::new(symmetrize(&cov));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let floor = 1e-12 * (lam.iter().sum::<f64>() / n as f64).max(1e-12);
    let noise_var = if m < n {
        (lam[m..].iter().sum::<f64>() / (n - m) as f64).max(floor)
    } else {
        floor
    };
    let mut c = DMatrix::zeros(n, m);
    for (j, &i) in order.iter().take(m).enumerate() {
        let scale = (lam[j] - noise_var).max(0.0).sqrt();
        c.column_mut(j).copy_from(&(eig.eigenvectors.column(i) * scale));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let loglik = -0.5
        * nf
        * (n as f64 * ln2pi
            + lam[..m].iter().map(|l| l.max(noise_var).ln()).sum::<f64>()
            + (n - m) as f64 * noise_var.ln()
            + m as f64
            + lam[m..].iter().sum::<f64>() / noise_var);

    let mm = c.transpose() * &c + DMatrix::identity(m, m) * noise_var;
    let proj = cholesky(&mm, "PPCA latent precision")?.solve(&c.transpose());
    let means: Vec<Option<DVector<f64>>> = (0..ys.len())
        .map(|t| observed[t].then(|| &proj * (&ys[t] - &d)))
        .collect();
    Ok(Ppca {
        x: interpolate(&means),
        c,
        d,
        noise_var,
        loglik,
    })
}

/// Fill gaps linearly between the nearest known neighbours; ends are held.
fn interpolate(xs: &[Option<DVector<f64>>]) -> Vec<DVector<f64>> {
    let known: Vec<usize> = (0..xs.len()).filter(|&t| xs[t].is_some()).collect();
    (0..xs.len())
        .map(|t| {
            if let Some(v) = &xs[t] {
                return v.clone();
            }
            let next = known.partition_point(|&k| k < t);
            match (next.checked_sub(1).map(|i| known[i]), known.get(next)) {
                (Some(a), Some(&b)) => {
                    let w = (t - a) as f64 / (b - a) as f64;
                    xs[a].as_ref().unwrap() * (1.0 - w) + xs[b].as_ref().unwrap() * w
                }
                (Some(a), None) => xs[a].clone().unwrap(),
                (None, Some(&b)) => xs[b].clone().unwrap(),
                (None, None) => unreachable!("ppca has observed rows"),
            }
        })
        .collect()
}

/// Logits of moving-average event rates over observed steps, with a
/// half-count of smoothing so no rate is exactly 0 or 1.
pub fn smoothed_logits(data: &Dataset, window: usize) -> Vec<DVector<f64>> {
    let t_len = data.len();
    let half = window / 2;
    (0..t_len)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(t_len);
            let mut sum = DVector::zeros(data.dim());
            let mut count = 0.0;
            for s in lo..hi {
                if data.mask[s] {
                    sum += &data.y[s];
                    count += 1.0;
                }
            }
            sum.map(|v| {
                let p = (v + 0.5) / (count + 1.0);
                (p / (1.0 - p)).ln()
            })
        })
        .collect()
}

/// PPCA stage for either output family.
pub fn ppca_init(data: &Dataset, m: usize, window: usize) -> Result<Ppca> {
    data.validate()?;
    match data.family {
        EmissionFamily::Gaussian => ppca(&data.y, &data.mask, m),
        EmissionFamily::Bernoulli => ppca(&smoothed_logits(data, window), &data.mask, m),
    }
}

// ------------------------------------------------------- logistic MAP

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub w: DVector<f64>,
    /// Data log likelihood at the MAP weights (prior excluded).
    pub loglik: f64,
    pub iters: usize,
}

fn logistic_objective(phis: &[DVector<f64>], ys: &[f64], w: &DVector<f64>, prec: f64) -> (f64, f64) {
    let ll: f64 = phis
        .iter()
        .zip(ys)
        .map(|(p, &y)| {
            let a = w.dot(p);
            y * log_sigmoid(a) + (1.0 - y) * log_sigmoid(-a)
        })
        .sum();
    (ll - 0.5 * prec * w.norm_squared(), ll)
}

/// MAP logistic regression under N(0, prec^-1 I) by Newton's method with
/// step halving; stops at max-norm gradient 1e-8 or 50 iterations.
pub fn fit_logistic(phis: &[DVector<f64>], ys: &[f64], prec: f64) -> Result<LogisticFit> {
    if phis.len() != ys.len() {
        return Err(Error::Dimension("features and targets differ in length".into()));
    }
    let f = phis.first().map_or(0, |p| p.len());
    let mut w = DVector::zeros(f);
    let (mut obj, mut ll) = logistic_objective(phis, ys, &w, prec);
    let mut iters = 0;
    while iters < 50 {
        let mut g = -&w * prec;
        let mut h = DMatrix::identity(f, f) * prec;
        for (p, &y) in phis.iter().zip(ys) {
            let s = sigmoid(w.dot(p));
            g.axpy(y - s, p, 1.0);
            h.ger(s * (1.0 - s), p, p, 1.0);
        }
        if g.amax() < 1e-8 {
            break;
        }
        iters += 1;
        let step = cholesky(&h, "logistic Hessian")?.solve(&g);
        let mut scale = 1.0;
        loop {
            let cand = &w + &step * scale;
            let (o, l) = logistic_objective(phis, ys, &cand, prec);
            if o >= obj || scale < 1e-10 {
                if o >= obj {
                    w = cand;
                    obj = o;
                    ll = l;
                }
                break;
            }
            scale *= 0.5;
        }
        if scale < 1e-10 {
            break;
        }
    }
    Ok(LogisticFit { w, loglik: ll, iters })
}

// ------------------------------------------------------ decision list

/// Ordered classifier: output `outputs[j]` at the first level whose
/// predicate `r_j^T [x; 1] > 0` holds, else the last output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionList {
    pub outputs: Vec<usize>,
    pub predicates: Vec<DVector<f64>>,
    /// Log likelihood of each level's regression.
    pub level_loglik: Vec<f64>,
}

impl DecisionList {
    pub fn predict(&self, x: &DVector<f64>) -> usize {
        let phi = augment_one(x);
        for (j, r) in self.predicates.iter().enumerate() {
            if r.dot(&phi) > 0.0 {
                return self.outputs[j];
            }
        }
        *self.outputs.last().expect("nonempty list")
    }

    /// `inverse()[old] = new` for the relabeling new i = old outputs[i].
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.outputs.len()];
        for (i, &o) in self.outputs.iter().enumerate() {
            inv[o] = i;
        }
        inv
    }

    pub fn total_loglik(&self) -> f64 {
        self.level_loglik.iter().sum()
    }
}

fn level_fit(phis: &[DVector<f64>], z_next: &[usize], rows: &[usize], state: usize, prec: f64) -> Result<LogisticFit> {
    let p: Vec<DVector<f64>> = rows.iter().map(|&t| phis[t].clone()).collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|&t| if z_next[t] == state { 1.0 } else { 0.0 })
        .collect();
    fit_logistic(&p, &y, prec)
}

/// Greedy fit on `(x_t, z_{t+1})` pairs. At each level every remaining
/// state gets a one-vs-rest regression on the remaining rows; the best by
/// log likelihood is fixed and its rows are removed.
pub fn fit_decision_list(x: &[DVector<f64>], z_next: &[usize], k: usize, prec: f64) -> Result<DecisionList> {
    if x.len() != z_next.len() {
        return Err(Error::Dimension("inputs and labels differ in length".into()));
    }
    if k == 0 || z_next.iter().any(|&z| z >= k) {
        return Err(Error::InvalidParameter("labels out of range for K".into()));
    }
    let phis: Vec<DVector<f64>> = x.iter().map(augment_one).collect();
    let f = phis.first().map_or(1, |p| p.len());
    let mut rows: Vec<usize> = (0..x.len()).collect();
    let mut remaining: Vec<usize> = (0..k).collect();
    let mut outputs = Vec::with_capacity(k);
    let mut predicates = Vec::with_capacity(k.saturating_sub(1));
    let mut level_loglik = Vec::with_capacity(k.saturating_sub(1));
    while remaining.len() > 1 {
        let mut counts = vec![0usize; k];
        for &t in &rows {
            counts[z_next[t]] += 1;
        }
        let present = remaining.iter().filter(|&&s| counts[s] > 0).count();
        let (pos, w, ll) = if present <= 1 {
            // one class left (or none): majority output, constant predicate
            let pos = (0..remaining.len())
                .max_by(|&a, &b| counts[remaining[a]].cmp(&counts[remaining[b]]).then(b.cmp(&a)))
                .expect("nonempty");
            let mut w = DVector::zeros(f);
            w[f - 1] = CONST_TRUE_BIAS;
            (pos, w, 0.0)
        } else {
            let fits: Vec<LogisticFit> = remaining
                .par_iter()
                .map(|&s| level_fit(&phis, z_next, &rows, s, prec))
                .collect::<Result<_>>()?;
            let mut best = 0;
            for (i, fit) in fits.iter().enumerate() {
                if fit.loglik > fits[best].loglik {
                    best = i;
                }
            }
            (best, fits[best].w.clone(), fits[best].loglik)
        };
        let state = remaining.remove(pos);
        rows.retain(|&t| z_next[t] != state);
        outputs.push(state);
        predicates.push(w);
        level_loglik.push(ll);
    }
    outputs.extend(remaining);
    Ok(DecisionList {
        outputs,
        predicates,
        level_loglik,
    })
}

/// Sum of level log likelihoods for a fixed output order; the objective
/// that the greedy search approximately maximizes.
pub fn sequential_loglik(x: &[DVector<f64>], z_next: &[usize], order: &[usize], prec: f64) -> Result<f64> {
    let phis: Vec<DVector<f64>> = x.iter().map(augment_one).collect();
    let mut rows: Vec<usize> = (0..x.len()).collect();
    let mut total = 0.0;
    for &state in &order[..order.len().saturating_sub(1)] {
        let present: std::collections::BTreeSet<usize> = rows.iter().map(|&t| z_next[t]).collect();
        if present.len() > 1 {
            total += level_fit(&phis, z_next, &rows, state, prec)?.loglik;
        }
        rows.retain(|&t| z_next[t] != state);
    }
    Ok(total)
}

// -------------------------------------------------------------- AR-HMM

#[derive(Debug, Clone)]
pub struct ArhmmFit {
    pub z: Vec<usize>,
    pub dynamics: Vec<Dynamics>,
    pub trans: DMatrix<f64>,
    /// Log posterior (up to a constant) before each M step, and at the end.
    pub objective: Vec<f64>,
}

/// Dirichlet concentration on transition rows during EM.
const ARHMM_ALPHA: f64 = 2.0;

fn kmeans(feats: &[DVector<f64>], k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = feats.len();
    let dist = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm_squared();
    let mut best: (f64, Vec<usize>) = (f64::INFINITY, vec![0; n]);
    for _ in 0..restarts.max(1) {
        // k-means++ seeding
        let mut centers = vec![feats[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d2: Vec<f64> = feats
                .iter()
                .map(|f| centers.iter().map(|c| dist(f, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            centers.push(feats[pick].clone());
        }
        let mut labels = vec![0; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, f) in feats.iter().enumerate() {
                let l = (0..k)
                    .min_by(|&a, &b| dist(f, &centers[a]).total_cmp(&dist(f, &centers[b])))
                    .unwrap();
                changed |= l != labels[i];
                labels[i] = l;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&DVector<f64>> = feats
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(f, _)| f)
                    .collect();
                if !members.is_empty() {
                    *center = members.iter().fold(DVector::zeros(f_dim(feats)), |a, f| a + *f) / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = feats.iter().zip(&labels).map(|(f, &l)| dist(f, &centers[l])).sum();
        if inertia < best.0 {
            best = (inertia, labels);
        }
    }
    best.1
}

fn f_dim(feats: &[DVector<f64>]) -> usize {
    feats.first().map_or(0, |f| f.len())
}

fn dirichlet_mode_rows(counts: &DMatrix<f64>) -> DMatrix<f64> {
    let k = counts.nrows();
    let mut p = counts.map(|c| c + ARHMM_ALPHA - 1.0);
    for i in 0..k {
        let s: f64 = p.row(i).sum();
        p.row_mut(i).scale_mut(1.0 / s);
    }
    p
}

fn arhmm_chain(x: &[DVector<f64>], dynamics: &[Dynamics], trans: &DMatrix<f64>) -> Result<DiscreteChain> {
    let k = dynamics.len();
    let chols = dynamics
        .iter()
        .map(|d| cholesky(&d.q, "AR-HMM noise"))
        .collect::<Result<Vec<_>>>()?;
    let log_pi = trans.map(f64::ln);
    let log_trans = (0..x.len() - 1)
        .map(|t| {
            let ll: Vec<f64> = (0..k)
                .map(|j| mvn_logpdf_chol(&x[t + 1], &dynamics[j].mean(&x[t]), &chols[j]))
                .collect();
            DMatrix::from_fn(k, k, |i, j| log_pi[(i, j)] + ll[j])
        })
        .collect();
    Ok(DiscreteChain {
        log_init: DVector::from_element(k, -(k as f64).ln()),
        log_trans,
        log_unary: None,
    })
}

fn m_step(x: &[DVector<f64>], weights: &[DVector<f64>], prior: &MniwParams, k: usize) -> Result<Vec<Dynamics>> {
    let m = x[0].len();
    let mut stats = vec![MniwStats::zeros(m, m + 1); k];
    for t in 0..x.len() - 1 {
        let phi = augment_one(&x[t]);
        for (j, s) in stats.iter_mut().enumerate() {
            if weights[t][j] > 0.0 {
                s.add_row(&phi, &x[t + 1], weights[t][j]);
            }
        }
    }
    stats
        .iter()
        .map(|s| {
            let (w, q) = mniw_posterior_stats(prior, s)?.mode();
            Ok(Dynamics::from_weights(&w, q))
        })
        .collect()
}

pub fn run_em(x: &[DVector<f64>], labels: &[usize], k: usize, n_iters: usize, prior: &MniwParams) -> Result<ArhmmFit> {
    let t_len = x.len();
    // transition t -> t+1 is labeled by the state entered at t+1
    let mut weights: Vec<DVector<f64>> = labels
        .iter()
        .map(|&l| DVector::from_fn(k, |j, _| if j == l { 1.0 } else { 0.0 }))
        .collect();
    let mut dynamics = m_step(x, &weights, prior, k)?;
    let mut counts = DMatrix::zeros(k, k);
    for w in labels.windows(2) {
        counts[(w[0], w[1])] += 1.0;
    }
    let mut trans = dirichlet_mode_rows(&counts);
    let mut objective = Vec::with_capacity(n_iters + 1);
    let log_prior = |dynamics: &[Dynamics], trans: &DMatrix<f64>| -> Result<f64> {
        let mut lp = trans.map(f64::ln).sum() * (ARHMM_ALPHA - 1.0);
        for d in dynamics {
            lp += prior.log_density(&d.weights(), &d.q)?;
        }
        Ok(lp)
    };
    for _ in 0..n_iters {
        let marg = hmm_marginals(&arhmm_chain(x, &dynamics, &trans)?)?;
        objective.push(marg.log_partition + log_prior(&dynamics, &trans)?);
        weights = (0..t_len - 1).map(|t| marg.unary[t + 1].clone()).collect();
        counts = marg.pairwise.iter().fold(DMatrix::zeros(k, k), |a, p| a + p);
        dynamics = m_step(x, &weights, prior, k)?;
        trans = dirichlet_mode_rows(&counts);
    }
    let chain = arhmm_chain(x, &dynamics, &trans)?;
    objective.push(hmm_marginals(&chain)?.log_partition + log_prior(&dynamics, &trans)?);
    Ok(ArhmmFit {
        z: viterbi(&chain)?,
        dynamics,
        trans,
        objective,
    })
}

fn random_blocks(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels = Vec::with_capacity(len);
    while labels.len() < len {
        let run = rng.random_range(10..=50).min(len - labels.len());
        let l = rng.random_range(0..k);
        labels.extend(std::iter::repeat_n(l, run));
    }
    labels
}

/// MAP EM for a K-state AR(1)-HMM. The first run is seeded by k-means on
/// `[x_t, x_{t+1} - x_t]`, the rest by random blocky segmentations; the
/// run with the highest final objective wins. Returns its Viterbi path.
pub fn arhmm_init(
    x: &[DVector<f64>],
    k: usize,
    n_iters: usize,
    prior: &MniwParams,
    cfg: &InitConfig,
) -> Result<ArhmmFit> {
    let t_len = x.len();
    if t_len < 2 || k == 0 {
        return Err(Error::InvalidParameter("AR-HMM needs T >= 2 and K >= 1".into()));
    }
    if x.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::Data("AR-HMM input contains non-finite values".into()));
    }
    let m = x[0].len();
    let mut feats: Vec<DVector<f64>> = (0..t_len - 1)
        .map(|t| {
            let mut f = DVector::zeros(2 * m);
            f.rows_mut(0, m).copy_from(&x[t]);
            f.rows_mut(m, m).copy_from(&(&x[t + 1] - &x[t]));
            f
        })
        .collect();
    let nf = feats.len() as f64;
    let mean = feats.iter().fold(DVector::zeros(2 * m), |a, f| a + f) / nf;
    let sd = feats
        .iter()
        .fold(DVector::zeros(2 * m), |a, f| a + (f - &mean).map(|v| v * v))
        .map(|v| (v / nf).sqrt().max(1e-12));
    for f in &mut feats {
        *f = (&*f - &mean).component_div(&sd);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seeds = vec![kmeans(&feats, k, cfg.kmeans_restarts, &mut rng)];
    for _ in 0..cfg.arhmm_restarts {
        seeds.push(random_blocks(t_len - 1, k, &mut rng));
    }
    let fits: Vec<ArhmmFit> = seeds
        .par_iter()
        .map(|labels| run_em(x, labels, k, n_iters, prior))
        .collect::<Result<_>>()?;
    let final_obj = |f: &ArhmmFit| *f.objective.last().expect("objective");
    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if final_obj(f) > final_obj(&fits[best]) {
            best = i;
        }
    }
    Ok(fits.into_iter().nth(best).expect("at least one run"))
}

// ------------------------------------------------------------ assembly

#[derive(Debug, Clone)]
pub struct InitResult {
    pub params: ModelParams,
    pub path: LatentPath,
    pub decision_list: DecisionList,
}

impl InitResult {
    /// Parameter document plus `"x_init"` and `"z_init"`.
    pub fn to_json(&self) -> Value {
        let mut doc = self.params.to_json();
        let x: Vec<&[f64]> = self.path.x.iter().map(|v| v.as_slice()).collect();
        doc["x_init"] = json!(x);
        doc["z_init"] = json!(self.path.z);
        doc
    }
}

fn stacked_predicates(dl: &DecisionList, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let k1 = dl.predicates.len();
    (
        DMatrix::from_fn(k1, m, |s, i| dl.predicates[s][i]),
        DVector::from_fn(k1, |s, _| dl.predicates[s][m]),
    )
}

/// Transition parameters for `variant` in the relabeled state order.
fn init_transitions(
    variant: VariantTag,
    k: usize,
    m: usize,
    z: &[usize],
    dl: &DecisionList,
    markov: &DMatrix<f64>,
    alpha: f64,
) -> Transitions {
    let strat = variant.strategy();
    let layout = strat.layout(k, m);
    let (r_x, r_b) = stacked_predicates(dl, m);
    let mut counts = DMatrix::zeros(k, k);
    for w in z.windows(2) {
        counts[(w[0], w[1])] += 1.0;
    }
    let weights = match variant {
        VariantTag::StandardSlds => vec![strat.weight_prior_mean(k, m); layout.groups],
        VariantTag::RecurrentSticky => (0..k)
            .map(|g| {
                let n: f64 = counts.row(g).sum();
                let p = (counts[(g, g)] + 1.0) / (n + 2.0);
                let mut w = DMatrix::zeros(1, m + 1);
                w[(0, m)] = (p / (1.0 - p)).ln();
                w
            })
            .collect(),
        _ => {
            let tail = layout.features - m;
            let mut w = DMatrix::zeros(k - 1, layout.features);
            w.columns_mut(0, m).copy_from(&r_x);
            for c in 0..tail {
                w.column_mut(m + c).copy_from(&r_b);
            }
            vec![w; layout.groups]
        }
    };
    let rows = match strat.markov_rows() {
        MarkovRows::None => None,
        MarkovRows::Full => Some(markov.clone()),
        MarkovRows::OffDiagonal => {
            let mut p = counts.map(|c| c + alpha);
            for i in 0..k {
                p[(i, i)] = 0.0;
                let s: f64 = p.row(i).sum();
                p.row_mut(i).scale_mut(1.0 / s);
            }
            Some(p)
        }
    };
    Transitions { weights, rows }
}

/// Combine the three stages into model parameters and a latent path.
pub fn assemble_init(
    variant: VariantTag,
    data: &Dataset,
    x_init: Vec<DVector<f64>>,
    emission: Emission,
    arhmm: &ArhmmFit,
    dl: &DecisionList,
    hypers: &Hypers,
) -> Result<InitResult> {
    let k = arhmm.dynamics.len();
    let m = x_init.first().map_or(0, |x| x.len());
    let inv = dl.inverse();
    let z: Vec<usize> = arhmm.z.iter().map(|&s| inv[s]).collect();
    let perm = &dl.outputs;
    let markov = DMatrix::from_fn(k, k, |i, j| arhmm.trans[(perm[i], perm[j])]);
    let transitions = init_transitions(variant, k, m, &z, dl, &markov, hypers.alpha);
    let params = ModelParams {
        variant,
        k,
        m,
        n: data.dim(),
        dynamics: perm.iter().map(|&p| arhmm.dynamics[p].clone()).collect(),
        emission,
        transitions,
        permutation: perm.clone(),
    };
    params.validate()?;
    Ok(InitResult {
        params,
        path: LatentPath { z, x: x_init },
        decision_list: dl.clone(),
    })
}

/// MAP GLM rows for Bernoulli outputs given a latent path.
pub fn bernoulli_glm(x: &[DVector<f64>], data: &Dataset, prec: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = x[0].len();
    let rows: Vec<usize> = (0..data.len()).filter(|&t| data.mask[t]).collect();
    let phis: Vec<DVector<f64>> = rows.iter().map(|&t| augment_one(&x[t])).collect();
    let fits: Vec<LogisticFit> = (0..data.dim())
        .into_par_iter()
        .map(|n| {
            let y: Vec<f64> = rows.iter().map(|&t| data.y[t][n]).collect();
            fit_logistic(&phis, &y, prec)
        })
        .collect::<Result<_>>()?;
    let w = DMatrix::from_fn(data.dim(), m + 1, |n, j| fits[n].w[j]);
    Ok((w.columns(0, m).into_owned(), w.column(m).into_owned()))
}

/// Full pipeline: PPCA (skipped when x is observed), AR-HMM, decision list.
pub fn initialize(
    data: &Dataset,
    variant: VariantTag,
    k: usize,
    m: usize,
    hypers: &Hypers,
    cfg: &InitConfig,
) -> Result<InitResult> {
    data.validate()?;
    let (x_init, emission) = if variant.strategy().observes_x() {
        if data.mask.iter().any(|o| !o) {
            return Err(Error::Data(
                "rarhmm observes x directly and cannot fit masked steps".into(),
            ));
        }
        if data.dim() != m {
            return Err(Error::InvalidParameter(format!(
                "rarhmm needs N = M (got N={}, M={m})",
                data.dim()
            )));
        }
        (data.y.clone(), Emission::Identity)
    } else {
        let p = ppca_init(data, m, cfg.smoothing_window)?;
        let emission = match data.family {
            EmissionFamily::Gaussian => Emission::Gaussian {
                c: p.c.clone(),
                d: p.d.clone(),
                s: DMatrix::identity(data.dim(), data.dim()) * p.noise_var,
            },
            EmissionFamily::Bernoulli => {
                let (c, d) = bernoulli_glm(&p.x, data, 1.0 / hypers.bernoulli_var)?;
                Emission::Bernoulli { c, d }
            }
        };
        (p.x, emission)
    };
    let arhmm = if data.family == EmissionFamily::Bernoulli && cfg.segment_halfwidth > 0 {
        let smooth = moving_average(&x_init, cfg.segment_halfwidth);
        let mut fit = arhmm_init(&smooth, k, cfg.arhmm_iters, &hypers.dynamics, cfg)?;
        let hard: Vec<DVector<f64>> = fit.z[1..]
            .iter()
            .map(|&l| DVector::from_fn(k, |j, _| if j == l { 1.0 } else { 0.0 }))
            .collect();
        fit.dynamics = m_step(&x_init, &hard, &hypers.dynamics, k)?;
        fit
    } else {
        arhmm_init(&x_init, k, cfg.arhmm_iters, &hypers.dynamics, cfg)?
    };
    let dl = fit_decision_list(&x_init[..x_init.len() - 1], &arhmm.z[1..], k, cfg.logistic_prec)?;
    assemble_init(variant, data, x_init, emission, &arhmm, &dl, hypers)
}

/// Centered moving average, truncated at the ends.
pub fn moving_average(x: &[DVector<f64>], half: usize) -> Vec<DVector<f64>> {
    let m = x.first().map_or(0, |v| v.len());
    (0..x.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(x.len());
            x[lo..hi].iter().fold(DVector::zeros(m), |a, v| a + v) / (hi - lo) as f64
        })
        .collect()
}
