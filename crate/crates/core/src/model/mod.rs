//! Parameter containers, the variant taxonomy, prior sampling and forward
//! simulation.

mod json;
pub mod variants;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_dirichlet, sample_matrix_normal, sample_mniw, DirichletParams, MniwParams};
use crate::error::{Error, Result};
use crate::linalg::{augment_one, cholesky, sample_mvn, std_normal_vec};
use crate::messages::sample_log_categorical;
pub use json::{read_json_file, write_json_file};
pub use variants::{lookup, registry, MarkovRows, StickLayout, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantTag {
    #[serde(rename = "slds")]
    StandardSlds,
    #[serde(rename = "rslds")]
    RecurrentSlds,
    #[serde(rename = "rslds-s")]
    SharedRslds,
    #[serde(rename = "rslds-ro")]
    RecurrenceOnly,
    #[serde(rename = "rslds-sticky")]
    RecurrentSticky,
    #[serde(rename = "rarhmm")]
    RecurrentArhmm,
}

impl VariantTag {
    pub fn strategy(self) -> &'static dyn Variant {
        registry()
            .iter()
            .copied()
            .find(|v| v.tag() == self)
            .expect("every tag is registered")
    }

    pub fn name(self) -> &'static str {
        self.strategy().name()
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(lookup(name)?.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmissionFamily {
    Gaussian,
    Bernoulli,
}

impl EmissionFamily {
    pub fn name(self) -> &'static str {
        match self {
            EmissionFamily::Gaussian => "gaussian",
            EmissionFamily::Bernoulli => "bernoulli",
        }
    }
}

/// x_{t+1} = A x_t + b + v, v ~ N(0, Q).
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl Dynamics {
    /// `[A | b]`
    pub fn weights(&self) -> DMatrix<f64> {
        let m = self.a.nrows();
        let mut w = DMatrix::zeros(m, m + 1);
        w.columns_mut(0, m).copy_from(&self.a);
        w.column_mut(m).copy_from(&self.b);
        w
    }

    pub fn from_weights(w: &DMatrix<f64>, q: DMatrix<f64>) -> Self {
        let m = w.nrows();
        Self {
            a: w.columns(0, m).into_owned(),
            b: w.column(m).into_owned(),
            q,
        }
    }

    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    /// y = C x + d + w, w ~ N(0, S)
    Gaussian {
        c: DMatrix<f64>,
        d: DVector<f64>,
        s: DMatrix<f64>,
    },
    /// y_n ~ Bernoulli(sigma(c_n^T x + d_n))
    Bernoulli { c: DMatrix<f64>, d: DVector<f64> },
    /// y = x (rAR-HMM)
    Identity,
}

impl Emission {
    pub fn family(&self) -> EmissionFamily {
        match self {
            Emission::Bernoulli { .. } => EmissionFamily::Bernoulli,
            _ => EmissionFamily::Gaussian,
        }
    }

    /// `(C, d)` for the two regression emissions.
    pub fn weights(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        match self {
            Emission::Gaussian { c, d, .. } | Emission::Bernoulli { c, d } => Some((c, d)),
            Emission::Identity => None,
        }
    }
}

/// Transition parameters in the layout given by the variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    /// One `sticks x features` matrix per group.
    pub weights: Vec<DMatrix<f64>>,
    /// pi rows (Markov variant) or pi_tilde rows (sticky variant).
    pub rows: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: VariantTag,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub dynamics: Vec<Dynamics>,
    pub emission: Emission,
    pub transitions: Transitions,
    /// `permutation[new] = old` label map applied at initialization.
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentPath {
    pub z: Vec<usize>,
    pub x: Vec<DVector<f64>>,
}

impl LatentPath {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<DVector<f64>>,
    /// true = observed
    pub mask: Vec<bool>,
    pub family: EmissionFamily,
}

impl Dataset {
    pub fn new(y: Vec<DVector<f64>>, mask: Vec<bool>, family: EmissionFamily) -> Result<Self> {
        let d = Self { y, mask, family };
        d.validate()?;
        Ok(d)
    }

    pub fn fully_observed(y: Vec<DVector<f64>>, family: EmissionFamily) -> Result<Self> {
        let mask = vec![true; y.len()];
        Self::new(y, mask, family)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.y.first().map_or(0, DVector::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.y.len() {
            return Err(Error::Data(format!(
                "mask has {} entries for {} time steps",
                self.mask.len(),
                self.y.len()
            )));
        }
        let n = self.dim();
        for (t, (y, &obs)) in self.y.iter().zip(&self.mask).enumerate() {
            if y.len() != n {
                return Err(Error::Data(format!("row {t} has {} entries, expected {n}", y.len())));
            }
            if !obs {
                continue;
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("row {t} is observed but not finite")));
            }
            if self.family == EmissionFamily::Bernoulli && y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("row {t} is not binary")));
            }
        }
        Ok(())
    }

    /// Mask the half-open interval `[a, b)` of 0-based steps.
    pub fn mask_interval(&mut self, a: usize, b: usize) -> Result<()> {
        if a > b || b > self.len() {
            return Err(Error::InvalidParameter(format!(
                "mask interval {a}:{b} is outside 0..{}",
                self.len()
            )));
        }
        for m in &mut self.mask[a..b] {
            *m = false;
        }
        Ok(())
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypers {
    /// Dirichlet concentration for pi / pi_tilde rows.
    pub alpha: f64,
    /// MNIW prior on `[A_k | b_k]`, `Q_k`.
    pub dynamics: MniwParams,
    /// MNIW prior on `[C | d]`, `S` (Gaussian emissions).
    pub emission: MniwParams,
    /// Prior variance of each Bernoulli emission row `[c_n; d_n]`.
    pub bernoulli_var: f64,
    /// Prior variance of each stick-weight row around the variant's mean.
    pub recurrence_var: f64,
}

impl Hypers {
    pub fn default_for(m: usize, n: usize) -> Result<Self> {
        let mut m0 = DMatrix::zeros(m, m + 1);
        for i in 0..m {
            m0[(i, i)] = 0.99;
        }
        let dynamics = MniwParams::new(
            m0,
            DMatrix::identity(m + 1, m + 1) * 0.01,
            DMatrix::identity(m, m) * 0.1,
            m as f64 + 2.0,
        )?;
        let emission = MniwParams::new(
            DMatrix::zeros(n, m + 1),
            DMatrix::identity(m + 1, m + 1),
            DMatrix::identity(n, n) * 0.1,
            n as f64 + 2.0,
        )?;
        Ok(Self {
            alpha: 1.0,
            dynamics,
            emission,
            bernoulli_var: 1.0,
            recurrence_var: 100.0,
        })
    }
}

fn check_dims(k: usize, m: usize, n: usize, variant: VariantTag) -> Result<()> {
    if k == 0 || m == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!(
            "K, M and N must be positive (got {k}, {m}, {n})"
        )));
    }
    if variant == VariantTag::RecurrentSticky && k < 2 {
        return Err(Error::InvalidParameter("the sticky variant needs K >= 2".into()));
    }
    if variant == VariantTag::RecurrentArhmm && n != m {
        return Err(Error::InvalidParameter(format!(
            "rarhmm observes x directly, so N must equal M (got N={n}, M={m})"
        )));
    }
    Ok(())
}

/// Draw a Markov row from Dirichlet(alpha) over the allowed targets.
fn sample_markov_rows<R: Rng + ?Sized>(
    kind: MarkovRows,
    k: usize,
    alpha: f64,
    counts: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<Option<DMatrix<f64>>> {
    let off_diag = match kind {
        MarkovRows::None => return Ok(None),
        MarkovRows::Full => false,
        MarkovRows::OffDiagonal => true,
    };
    let mut rows = DMatrix::zeros(k, k);
    for i in 0..k {
        let targets: Vec<usize> = (0..k).filter(|&j| !(off_diag && j == i)).collect();
        let a = DVector::from_fn(targets.len(), |c, _| alpha + counts.map_or(0.0, |n| n[(i, targets[c])]));
        let p = sample_dirichlet(&DirichletParams::new(a)?, rng);
        for (c, &j) in targets.iter().enumerate() {
            rows[(i, j)] = p[c];
        }
    }
    Ok(Some(rows))
}

pub(crate) fn sample_markov_posterior<R: Rng + ?Sized>(
    kind: MarkovRows,
    k: usize,
    alpha: f64,
    counts: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Option<DMatrix<f64>>> {
    sample_markov_rows(kind, k, alpha, Some(counts), rng)
}

/// Draw theta from the prior.
pub fn sample_prior<R: Rng + ?Sized>(
    hypers: &Hypers,
    k: usize,
    m: usize,
    n: usize,
    variant: VariantTag,
    family: EmissionFamily,
    rng: &mut R,
) -> Result<ModelParams> {
    check_dims(k, m, n, variant)?;
    let strat = variant.strategy();
    let mut dynamics = Vec::with_capacity(k);
    for _ in 0..k {
        let (w, q) = sample_mniw(&hypers.dynamics, rng)?;
        dynamics.push(Dynamics::from_weights(&w, q));
    }
    let emission = if strat.observes_x() {
        Emission::Identity
    } else {
        match family {
            EmissionFamily::Gaussian => {
                let (w, s) = sample_mniw(&hypers.emission, rng)?;
                Emission::Gaussian {
                    c: w.columns(0, m).into_owned(),
                    d: w.column(m).into_owned(),
                    s,
                }
            }
            EmissionFamily::Bernoulli => {
                let sd = hypers.bernoulli_var.sqrt();
                let w = crate::linalg::std_normal_mat(n, m + 1, rng) * sd;
                Emission::Bernoulli {
                    c: w.columns(0, m).into_owned(),
                    d: w.column(m).into_owned(),
                }
            }
        }
    };
    let layout = strat.layout(k, m);
    let mean = strat.weight_prior_mean(k, m);
    let col_cov = DMatrix::identity(layout.features, layout.features) * hypers.recurrence_var;
    let row_cov = DMatrix::identity(layout.sticks, layout.sticks);
    let mut weights = Vec::with_capacity(layout.groups);
    for _ in 0..layout.groups {
        weights.push(if layout.sticks == 0 {
            mean.clone()
        } else {
            sample_matrix_normal(&mean, &row_cov, &col_cov, rng)?
        });
    }
    let rows = sample_markov_rows(strat.markov_rows(), k, hypers.alpha, None, rng)?;
    Ok(ModelParams {
        variant,
        k,
        m,
        n,
        dynamics,
        emission,
        transitions: Transitions { weights, rows },
        permutation: (0..k).collect(),
    })
}

impl ModelParams {
    pub fn strategy(&self) -> &'static dyn Variant {
        self.variant.strategy()
    }

    pub fn family(&self) -> EmissionFamily {
        self.emission.family()
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        check_dims(self.k, self.m, self.n, self.variant)?;
        let (k, m, n) = (self.k, self.m, self.n);
        if self.dynamics.len() != k {
            return Err(Error::Dimension(format!("{} dynamics for K={k}", self.dynamics.len())));
        }
        for (i, d) in self.dynamics.iter().enumerate() {
            if d.a.shape() != (m, m) || d.b.len() != m || d.q.shape() != (m, m) {
                return Err(Error::Dimension(format!("dynamics {i} do not match M={m}")));
            }
            cholesky(&d.q, "dynamics noise")?;
        }
        match &self.emission {
            Emission::Gaussian { c, d, s } => {
                if c.shape() != (n, m) || d.len() != n || s.shape() != (n, n) {
                    return Err(Error::Dimension("Gaussian emission shapes".into()));
                }
                cholesky(s, "emission noise")?;
            }
            Emission::Bernoulli { c, d } => {
                if c.shape() != (n, m) || d.len() != n {
                    return Err(Error::Dimension("Bernoulli emission shapes".into()));
                }
            }
            Emission::Identity => {
                if !self.strategy().observes_x() {
                    return Err(Error::InvalidParameter(
                        "identity emission is only valid for rarhmm".into(),
                    ));
                }
            }
        }
        let layout = self.strategy().layout(k, m);
        if self.transitions.weights.len() != layout.groups
            || self
                .transitions
                .weights
                .iter()
                .any(|w| w.shape() != (layout.sticks, layout.features))
        {
            return Err(Error::Dimension(format!(
                "transition weights must be {} matrices of {}x{}",
                layout.groups, layout.sticks, layout.features
            )));
        }
        match (self.strategy().markov_rows(), &self.transitions.rows) {
            (MarkovRows::None, None) => {}
            (MarkovRows::None, Some(_)) => return Err(Error::InvalidParameter("unexpected Markov rows".into())),
            (_, None) => return Err(Error::InvalidParameter("missing Markov rows".into())),
            (kind, Some(rows)) => {
                if rows.shape() != (k, k) {
                    return Err(Error::Dimension("Markov rows must be KxK".into()));
                }
                for i in 0..k {
                    let row = rows.row(i);
                    if row.iter().any(|p| !(*p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidParameter(format!("row {i} is not on the simplex")));
                    }
                    if kind == MarkovRows::OffDiagonal && rows[(i, i)] != 0.0 {
                        return Err(Error::InvalidParameter(
                            "pi_tilde rows must put no mass on the current state".into(),
                        ));
                    }
                }
            }
        }
        let mut seen = vec![false; k];
        if self.permutation.len() != k
            || self
                .permutation
                .iter()
                .any(|&p| p >= k || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidParameter(
                "permutation is not a permutation of 0..K".into(),
            ));
        }
        Ok(())
    }

    /// Stick features `phi = [x; tail(z_prev)]`.
    pub fn features(&self, z_prev: usize, x: &DVector<f64>) -> DVector<f64> {
        let tail = self.strategy().tail(z_prev, self.k);
        let mut phi = DVector::zeros(x.len() + tail.len());
        phi.rows_mut(0, x.len()).copy_from(x);
        phi.rows_mut(x.len(), tail.len()).copy_from(&tail);
        phi
    }

    /// Stick logits for the transition out of `(z_prev, x)`.
    pub fn logits(&self, z_prev: usize, x: &DVector<f64>) -> DVector<f64> {
        let s = self.strategy();
        if s.layout(self.k, self.m).sticks == 0 {
            return DVector::zeros(0);
        }
        &self.transitions.weights[s.group(z_prev)] * self.features(z_prev, x)
    }

    pub fn log_trans_probs(&self, z_prev: usize, x: &DVector<f64>) -> DVector<f64> {
        let nu = self.logits(z_prev, x);
        self.strategy().log_probs(&self.transitions, z_prev, nu.as_slice())
    }

    pub fn trans_probs(&self, z_prev: usize, x: &DVector<f64>) -> DVector<f64> {
        let nu = self.logits(z_prev, x);
        self.strategy().probs(&self.transitions, z_prev, nu.as_slice())
    }

    /// Stick regression split into the part acting on x and the offset, for
    /// the transition out of `z_prev`.
    pub fn stick_affine(&self, z_prev: usize) -> (DMatrix<f64>, DVector<f64>) {
        let s = self.strategy();
        let w = &self.transitions.weights[s.group(z_prev)];
        let tail = s.tail(z_prev, self.k);
        (w.columns(0, self.m).into_owned(), w.columns(self.m, tail.len()) * tail)
    }

    /// Emission logits / means `C x + d`.
    pub fn emission_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.emission.weights() {
            Some((c, d)) => c * x + d,
            None => x.clone(),
        }
    }

    /// Relabel states: new state `i` is old state `perm[i]`. Markov rows are
    /// permuted on both axes; stick weights are left alone because their
    /// meaning depends on the stick order.
    pub fn relabel(&self, perm: &[usize]) -> Result<ModelParams> {
        let k = self.k;
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidParameter("not a permutation".into()));
        }
        let mut out = self.clone();
        out.dynamics = perm.iter().map(|&p| self.dynamics[p].clone()).collect();
        if let Some(rows) = &self.transitions.rows {
            out.transitions.rows = Some(DMatrix::from_fn(k, k, |i, j| rows[(perm[i], perm[j])]));
        }
        out.permutation = perm.iter().map(|&p| self.permutation[p]).collect();
        Ok(out)
    }
}

/// Draw z_t given the previous state and continuous state.
pub fn step_discrete<R: Rng + ?Sized>(
    params: &ModelParams,
    z_prev: usize,
    x_prev: &DVector<f64>,
    rng: &mut R,
) -> usize {
    sample_log_categorical(params.log_trans_probs(z_prev, x_prev).as_slice(), rng)
}

/// Draw x_t = A x_prev + b + v under the dynamics of `z_t`.
pub fn step_continuous<R: Rng + ?Sized>(
    params: &ModelParams,
    z_t: usize,
    x_prev: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = &params.dynamics[z_t];
    sample_mvn(&d.mean(x_prev), &d.q, rng)
}

/// Draw y_t given x_t. Emissions are shared across discrete states.
pub fn emit<R: Rng + ?Sized>(
    params: &ModelParams,
    _z_t: usize,
    x_t: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    match &params.emission {
        Emission::Gaussian { c, d, s } => sample_mvn(&(c * x_t + d), s, rng),
        Emission::Bernoulli { c, d } => {
            let nu = c * x_t + d;
            Ok(nu.map(|v| {
                if rng.random::<f64>() < crate::stickbreak::sigmoid(v) {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        Emission::Identity => Ok(x_t.clone()),
    }
}

/// Roll the generative model forward for `t_len` steps. `x1` overrides the
/// N(0, I) draw for the first continuous state; z_1 is uniform.
pub fn simulate<R: Rng + ?Sized>(
    params: &ModelParams,
    t_len: usize,
    x1: Option<&DVector<f64>>,
    rng: &mut R,
) -> Result<(LatentPath, Dataset)> {
    if t_len == 0 {
        return Err(Error::InvalidParameter("T must be at least 1".into()));
    }
    let mut z = Vec::with_capacity(t_len);
    let mut x = Vec::with_capacity(t_len);
    let mut y = Vec::with_capacity(t_len);
    z.push(rng.random_range(0..params.k));
    x.push(match x1 {
        Some(v) => v.clone(),
        None => std_normal_vec(params.m, rng),
    });
    y.push(emit(params, z[0], &x[0], rng)?);
    for t in 1..t_len {
        let zt = step_discrete(params, z[t - 1], &x[t - 1], rng);
        let xt = step_continuous(params, zt, &x[t - 1], rng)?;
        y.push(emit(params, zt, &xt, rng)?);
        z.push(zt);
        x.push(xt);
    }
    let data = Dataset::fully_observed(y, params.family())?;
    Ok((LatentPath { z, x }, data))
}

/// `[x; 1]` for every step.
pub fn augmented_inputs(x: &[DVector<f64>]) -> Vec<DVector<f64>> {
    x.iter().map(augment_one).collect()
}
