//! Transition strategies for the model family, registered by name.
//!
//! Every recurrent variant is a set of logistic "stick" regressions:
//! the previous state picks a weight group `g`, the features are
//! `phi = [x; tail(z_prev)]`, and the stick logits are `nu = W_g phi`. The
//! Markov variant has no sticks at all. Keeping x first in `phi` lets the
//! samplers split `W_g` into the part acting on x and a constant offset.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use super::{Transitions, VariantTag};
use crate::error::{Error, Result};
use crate::linalg::{mat_from_rows, mat_to_rows};
use crate::stickbreak::{log_pmf_all, pi_sb, stick_targets};

/// Shape of the stick regressions for a given (K, M).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StickLayout {
    pub groups: usize,
    pub sticks: usize,
    /// Length of `phi`, including the M leading entries for x.
    pub features: usize,
}

/// Which transition counts feed the Dirichlet rows, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkovRows {
    None,
    /// Every transition (z_t -> z_{t+1}) counts.
    Full,
    /// Only transitions that leave the current state count.
    OffDiagonal,
}

pub trait Variant: Send + Sync {
    fn tag(&self) -> VariantTag;

    fn name(&self) -> &'static str;

    fn layout(&self, k: usize, m: usize) -> StickLayout;

    fn group(&self, z_prev: usize) -> usize;

    /// Features after x; empty for the Markov variant.
    fn tail(&self, z_prev: usize, k: usize) -> DVector<f64>;

    /// PG shapes and kappa for each stick on the transition z_prev -> z_next.
    fn targets(&self, z_prev: usize, z_next: usize, k: usize) -> (DVector<f64>, DVector<f64>);

    /// ln p(z_next = . | z_prev, x) given the stick logits.
    fn log_probs(&self, tr: &Transitions, z_prev: usize, nu: &[f64]) -> DVector<f64>;

    /// p(z_next = . | z_prev, x) given the stick logits.
    fn probs(&self, tr: &Transitions, z_prev: usize, nu: &[f64]) -> DVector<f64>;

    fn markov_rows(&self) -> MarkovRows {
        MarkovRows::None
    }

    /// Continuous state is observed directly.
    fn observes_x(&self) -> bool {
        false
    }

    /// Prior mean of one group's weights; chosen so that all states are
    /// equally likely at x = 0.
    fn weight_prior_mean(&self, k: usize, m: usize) -> DMatrix<f64>;

    fn write_json(&self, tr: &Transitions, k: usize, m: usize, out: &mut Map<String, Value>);

    fn read_json(&self, doc: &Map<String, Value>, k: usize, m: usize) -> Result<Transitions>;
}

static REGISTRY: [&dyn Variant; 6] = [
    &StandardSlds,
    &RecurrentSlds,
    &SharedRslds,
    &RecurrenceOnly,
    &RecurrentSticky,
    &RecurrentArhmm,
];

pub fn registry() -> &'static [&'static dyn Variant] {
    &REGISTRY
}

pub fn lookup(name: &str) -> Result<&'static dyn Variant> {
    REGISTRY.iter().copied().find(|v| v.name() == name).ok_or_else(|| {
        let known: Vec<_> = REGISTRY.iter().map(|v| v.name()).collect();
        Error::InvalidParameter(format!("unknown model '{name}' (expected one of {})", known.join(", ")))
    })
}

/// Logits that make every state equally likely: sigma(r_k) = 1 / (K - k).
pub fn uniform_stick_logits(k: usize) -> DVector<f64> {
    DVector::from_fn(k.saturating_sub(1), |i, _| -((k - i - 1) as f64).ln())
}

fn stick_weight_mean(k: usize, m: usize, tail_cols: usize) -> DMatrix<f64> {
    let r = uniform_stick_logits(k);
    let mut w = DMatrix::zeros(k - 1, m + tail_cols);
    for c in 0..tail_cols {
        w.column_mut(m + c).copy_from(&r);
    }
    w
}

fn one() -> DVector<f64> {
    DVector::from_element(1, 1.0)
}

fn stick_log_probs(nu: &[f64]) -> DVector<f64> {
    log_pmf_all(nu)
}

fn split(w: &DMatrix<f64>, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (w.columns(0, m).into_owned(), w.columns(m, w.ncols() - m).into_owned())
}

fn join(x_part: &DMatrix<f64>, tail: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(x_part.nrows(), x_part.ncols() + tail.ncols());
    w.columns_mut(0, x_part.ncols()).copy_from(x_part);
    w.columns_mut(x_part.ncols(), tail.ncols()).copy_from(tail);
    w
}

fn field<'a>(doc: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    doc.get(key)
        .ok_or_else(|| Error::Data(format!("missing field \"{key}\"")))
}

fn as_matrix(v: &Value, key: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("field \"{key}\": {e}")))?;
    mat_from_rows(&rows)
}

fn as_vector(v: &Value, key: &str) -> Result<DVector<f64>> {
    let xs: Vec<f64> = serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("field \"{key}\": {e}")))?;
    Ok(DVector::from_vec(xs))
}

fn as_matrices(v: &Value, key: &str) -> Result<Vec<DMatrix<f64>>> {
    let ms: Vec<Vec<Vec<f64>>> =
        serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("field \"{key}\": {e}")))?;
    ms.iter().map(|m| mat_from_rows(m)).collect()
}

fn check_shape(m: &DMatrix<f64>, shape: (usize, usize), key: &str) -> Result<()> {
    // an empty nested array parses as 0 x 0 regardless of the intended width
    if m.shape() == shape || (m.nrows() == 0 && shape.0 == 0) {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "field \"{key}\" has shape {:?}, expected {shape:?}",
            m.shape()
        )))
    }
}

fn fix_empty(m: DMatrix<f64>, cols: usize) -> DMatrix<f64> {
    if m.nrows() == 0 {
        DMatrix::zeros(0, cols)
    } else {
        m
    }
}

fn vec_to_json(v: &DVector<f64>) -> Value {
    json!(v.as_slice())
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    json!(mat_to_rows(m))
}

/// Markov transitions with Dirichlet rows.
pub struct StandardSlds;

impl Variant for StandardSlds {
    fn tag(&self) -> VariantTag {
        VariantTag::StandardSlds
    }
    fn name(&self) -> &'static str {
        "slds"
    }
    fn layout(&self, _k: usize, m: usize) -> StickLayout {
        StickLayout {
            groups: 0,
            sticks: 0,
            features: m,
        }
    }
    fn group(&self, _z_prev: usize) -> usize {
        0
    }
    fn tail(&self, _z_prev: usize, _k: usize) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn targets(&self, _: usize, _: usize, _: usize) -> (DVector<f64>, DVector<f64>) {
        (DVector::zeros(0), DVector::zeros(0))
    }
    fn log_probs(&self, tr: &Transitions, z_prev: usize, _nu: &[f64]) -> DVector<f64> {
        self.probs(tr, z_prev, _nu).map(f64::ln)
    }
    fn probs(&self, tr: &Transitions, z_prev: usize, _nu: &[f64]) -> DVector<f64> {
        tr.rows.as_ref().expect("Markov rows").row(z_prev).transpose()
    }
    fn markov_rows(&self) -> MarkovRows {
        MarkovRows::Full
    }
    fn weight_prior_mean(&self, _k: usize, m: usize) -> DMatrix<f64> {
        DMatrix::zeros(0, m)
    }
    fn write_json(&self, tr: &Transitions, _k: usize, _m: usize, out: &mut Map<String, Value>) {
        out.insert("pi".into(), mat_json(tr.rows.as_ref().expect("Markov rows")));
    }
    fn read_json(&self, doc: &Map<String, Value>, k: usize, _m: usize) -> Result<Transitions> {
        let pi = as_matrix(field(doc, "pi")?, "pi")?;
        check_shape(&pi, (k, k), "pi")?;
        Ok(Transitions {
            weights: Vec::new(),
            rows: Some(pi),
        })
    }
}

/// Per-state recurrence: nu = R_{z} x + r_{z}.
pub struct RecurrentSlds;

impl Variant for RecurrentSlds {
    fn tag(&self) -> VariantTag {
        VariantTag::RecurrentSlds
    }
    fn name(&self) -> &'static str {
        "rslds"
    }
    fn layout(&self, k: usize, m: usize) -> StickLayout {
        StickLayout {
            groups: k,
            sticks: k - 1,
            features: m + 1,
        }
    }
    fn group(&self, z_prev: usize) -> usize {
        z_prev
    }
    fn tail(&self, _z_prev: usize, _k: usize) -> DVector<f64> {
        one()
    }
    fn targets(&self, _z_prev: usize, z_next: usize, k: usize) -> (DVector<f64>, DVector<f64>) {
        stick_targets(z_next, k - 1)
    }
    fn log_probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        stick_log_probs(nu)
    }
    fn probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        pi_sb(nu)
    }
    fn weight_prior_mean(&self, k: usize, m: usize) -> DMatrix<f64> {
        stick_weight_mean(k, m, 1)
    }
    fn write_json(&self, tr: &Transitions, _k: usize, m: usize, out: &mut Map<String, Value>) {
        let (rs, bs): (Vec<_>, Vec<_>) = tr
            .weights
            .iter()
            .map(|w| {
                let (x, t) = split(w, m);
                (mat_json(&x), vec_to_json(&t.column(0).into_owned()))
            })
            .unzip();
        out.insert("R".into(), Value::Array(rs));
        out.insert("r".into(), Value::Array(bs));
    }
    fn read_json(&self, doc: &Map<String, Value>, k: usize, m: usize) -> Result<Transitions> {
        let rs = as_matrices(field(doc, "R")?, "R")?;
        let bs = as_matrix(field(doc, "r")?, "r")?;
        if rs.len() != k {
            return Err(Error::Data(format!("\"R\" needs {k} matrices, got {}", rs.len())));
        }
        let bs = fix_empty(bs, k - 1);
        if bs.nrows() != k {
            return Err(Error::Data(format!("\"r\" needs {k} rows, got {}", bs.nrows())));
        }
        check_shape(&bs, (k, k - 1), "r")?;
        let mut weights = Vec::with_capacity(k);
        for (g, r) in rs.into_iter().enumerate() {
            let r = fix_empty(r, m);
            check_shape(&r, (k - 1, m), "R")?;
            weights.push(join(&r, &DMatrix::from_fn(k - 1, 1, |s, _| bs[(g, s)])));
        }
        Ok(Transitions { weights, rows: None })
    }
}

/// Shared R with per-state biases: nu = R x + r_{z}.
pub struct SharedRslds;

impl Variant for SharedRslds {
    fn tag(&self) -> VariantTag {
        VariantTag::SharedRslds
    }
    fn name(&self) -> &'static str {
        "rslds-s"
    }
    fn layout(&self, k: usize, m: usize) -> StickLayout {
        StickLayout {
            groups: 1,
            sticks: k - 1,
            features: m + k,
        }
    }
    fn group(&self, _z_prev: usize) -> usize {
        0
    }
    fn tail(&self, z_prev: usize, k: usize) -> DVector<f64> {
        let mut e = DVector::zeros(k);
        e[z_prev] = 1.0;
        e
    }
    fn targets(&self, _z_prev: usize, z_next: usize, k: usize) -> (DVector<f64>, DVector<f64>) {
        stick_targets(z_next, k - 1)
    }
    fn log_probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        stick_log_probs(nu)
    }
    fn probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        pi_sb(nu)
    }
    fn weight_prior_mean(&self, k: usize, m: usize) -> DMatrix<f64> {
        stick_weight_mean(k, m, k)
    }
    fn write_json(&self, tr: &Transitions, _k: usize, m: usize, out: &mut Map<String, Value>) {
        let (x, t) = split(&tr.weights[0], m);
        out.insert("R".into(), mat_json(&x));
        // one bias vector per state
        out.insert("r".into(), mat_json(&t.transpose()));
    }
    fn read_json(&self, doc: &Map<String, Value>, k: usize, m: usize) -> Result<Transitions> {
        let r = fix_empty(as_matrix(field(doc, "R")?, "R")?, m);
        let bs = fix_empty(as_matrix(field(doc, "r")?, "r")?, k - 1);
        check_shape(&r, (k - 1, m), "R")?;
        if bs.nrows() != k {
            return Err(Error::Data(format!("\"r\" needs {k} rows, got {}", bs.nrows())));
        }
        check_shape(&bs, (k, k - 1), "r")?;
        Ok(Transitions {
            weights: vec![join(&r, &bs.transpose())],
            rows: None,
        })
    }
}

/// Transitions depend on x only: nu = R x + r.
pub struct RecurrenceOnly;

fn ro_write(tr: &Transitions, m: usize, out: &mut Map<String, Value>) {
    let (x, t) = split(&tr.weights[0], m);
    out.insert("R".into(), mat_json(&x));
    out.insert("r".into(), vec_to_json(&t.column(0).into_owned()));
}

fn ro_read(doc: &Map<String, Value>, k: usize, m: usize) -> Result<Transitions> {
    let r = fix_empty(as_matrix(field(doc, "R")?, "R")?, m);
    let b = as_vector(field(doc, "r")?, "r")?;
    check_shape(&r, (k - 1, m), "R")?;
    if b.len() != k - 1 {
        return Err(Error::Data(format!("\"r\" needs {} entries, got {}", k - 1, b.len())));
    }
    Ok(Transitions {
        weights: vec![join(&r, &DMatrix::from_column_slice(k - 1, 1, b.as_slice()))],
        rows: None,
    })
}

impl Variant for RecurrenceOnly {
    fn tag(&self) -> VariantTag {
        VariantTag::RecurrenceOnly
    }
    fn name(&self) -> &'static str {
        "rslds-ro"
    }
    fn layout(&self, k: usize, m: usize) -> StickLayout {
        StickLayout {
            groups: 1,
            sticks: k - 1,
            features: m + 1,
        }
    }
    fn group(&self, _z_prev: usize) -> usize {
        0
    }
    fn tail(&self, _z_prev: usize, _k: usize) -> DVector<f64> {
        one()
    }
    fn targets(&self, _z_prev: usize, z_next: usize, k: usize) -> (DVector<f64>, DVector<f64>) {
        stick_targets(z_next, k - 1)
    }
    fn log_probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        stick_log_probs(nu)
    }
    fn probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        pi_sb(nu)
    }
    fn weight_prior_mean(&self, k: usize, m: usize) -> DMatrix<f64> {
        stick_weight_mean(k, m, 1)
    }
    fn write_json(&self, tr: &Transitions, _k: usize, m: usize, out: &mut Map<String, Value>) {
        ro_write(tr, m, out)
    }
    fn read_json(&self, doc: &Map<String, Value>, k: usize, m: usize) -> Result<Transitions> {
        ro_read(doc, k, m)
    }
}

/// Stay-or-leave: stay with probability sigma(w_z^T x + c_z), otherwise move
/// to another state drawn from the row pi_tilde_z.
pub struct RecurrentSticky;

impl Variant for RecurrentSticky {
    fn tag(&self) -> VariantTag {
        VariantTag::RecurrentSticky
    }
    fn name(&self) -> &'static str {
        "rslds-sticky"
    }
    fn layout(&self, k: usize, m: usize) -> StickLayout {
        StickLayout {
            groups: k,
            sticks: 1,
            features: m + 1,
        }
    }
    fn group(&self, z_prev: usize) -> usize {
        z_prev
    }
    fn tail(&self, _z_prev: usize, _k: usize) -> DVector<f64> {
        one()
    }
    fn targets(&self, z_prev: usize, z_next: usize, _k: usize) -> (DVector<f64>, DVector<f64>) {
        let stay = if z_prev == z_next { 1.0 } else { 0.0 };
        (one(), DVector::from_element(1, stay - 0.5))
    }
    fn log_probs(&self, tr: &Transitions, z_prev: usize, nu: &[f64]) -> DVector<f64> {
        let rows = tr.rows.as_ref().expect("pi_tilde rows");
        let leave = crate::stickbreak::log_sigmoid(-nu[0]);
        DVector::from_fn(rows.ncols(), |j, _| {
            if j == z_prev {
                crate::stickbreak::log_sigmoid(nu[0])
            } else {
                leave + rows[(z_prev, j)].ln()
            }
        })
    }
    fn probs(&self, tr: &Transitions, z_prev: usize, nu: &[f64]) -> DVector<f64> {
        let rows = tr.rows.as_ref().expect("pi_tilde rows");
        let stay = crate::stickbreak::sigmoid(nu[0]);
        let leave = crate::stickbreak::sigmoid(-nu[0]);
        DVector::from_fn(
            rows.ncols(),
            |j, _| {
                if j == z_prev {
                    stay
                } else {
                    leave * rows[(z_prev, j)]
                }
            },
        )
    }
    fn markov_rows(&self) -> MarkovRows {
        MarkovRows::OffDiagonal
    }
    fn weight_prior_mean(&self, k: usize, m: usize) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(1, m + 1);
        // stay with probability 1/K at x = 0
        w[(0, m)] = -((k - 1) as f64).ln();
        w
    }
    fn write_json(&self, tr: &Transitions, k: usize, m: usize, out: &mut Map<String, Value>) {
        let stay = DMatrix::from_fn(k, m, |g, i| tr.weights[g][(0, i)]);
        let bias = DVector::from_fn(k, |g, _| tr.weights[g][(0, m)]);
        out.insert("r".into(), mat_json(&stay));
        out.insert("r_bias".into(), vec_to_json(&bias));
        out.insert("pi_tilde".into(), mat_json(tr.rows.as_ref().expect("pi_tilde rows")));
    }
    fn read_json(&self, doc: &Map<String, Value>, k: usize, m: usize) -> Result<Transitions> {
        let stay = as_matrix(field(doc, "r")?, "r")?;
        let bias = as_vector(field(doc, "r_bias")?, "r_bias")?;
        let rows = as_matrix(field(doc, "pi_tilde")?, "pi_tilde")?;
        check_shape(&stay, (k, m), "r")?;
        check_shape(&rows, (k, k), "pi_tilde")?;
        if bias.len() != k {
            return Err(Error::Data(format!("\"r_bias\" needs {k} entries")));
        }
        let weights = (0..k)
            .map(|g| {
                let mut w = DMatrix::zeros(1, m + 1);
                for i in 0..m {
                    w[(0, i)] = stay[(g, i)];
                }
                w[(0, m)] = bias[g];
                w
            })
            .collect();
        Ok(Transitions {
            weights,
            rows: Some(rows),
        })
    }
}

/// Recurrent AR-HMM: the continuous state is the observation, and
/// transitions use the recurrence-only link.
pub struct RecurrentArhmm;

impl Variant for RecurrentArhmm {
    fn tag(&self) -> VariantTag {
        VariantTag::RecurrentArhmm
    }
    fn name(&self) -> &'static str {
        "rarhmm"
    }
    fn layout(&self, k: usize, m: usize) -> StickLayout {
        RecurrenceOnly.layout(k, m)
    }
    fn group(&self, _z_prev: usize) -> usize {
        0
    }
    fn tail(&self, _z_prev: usize, _k: usize) -> DVector<f64> {
        one()
    }
    fn targets(&self, _z_prev: usize, z_next: usize, k: usize) -> (DVector<f64>, DVector<f64>) {
        stick_targets(z_next, k - 1)
    }
    fn log_probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        stick_log_probs(nu)
    }
    fn probs(&self, _tr: &Transitions, _z_prev: usize, nu: &[f64]) -> DVector<f64> {
        pi_sb(nu)
    }
    fn observes_x(&self) -> bool {
        true
    }
    fn weight_prior_mean(&self, k: usize, m: usize) -> DMatrix<f64> {
        stick_weight_mean(k, m, 1)
    }
    fn write_json(&self, tr: &Transitions, _k: usize, m: usize, out: &mut Map<String, Value>) {
        ro_write(tr, m, out)
    }
    fn read_json(&self, doc: &Map<String, Value>, k: usize, m: usize) -> Result<Transitions> {
        ro_read(doc, k, m)
    }
}
