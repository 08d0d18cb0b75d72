//! Evaluation metrics for fitted segmentations and generated sequences.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::augment_one;

/// Co-occurrence counts `[true, predicted]` over the steps in `idx`.
pub fn confusion(truth: &[usize], pred: &[usize], idx: &[usize]) -> DMatrix<f64> {
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let mut c = DMatrix::zeros(kt, kp);
    for &t in idx {
        c[(truth[t], pred[t])] += 1.0;
    }
    c
}

/// Greedy one-to-one matching of predicted labels to true labels, taking
/// the largest remaining co-occurrence each round. Predicted labels that
/// are left over map to `None`.
pub fn align_labels(conf: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (kt, kp) = conf.shape();
    let mut map = vec![None; kp];
    let mut used_t = vec![false; kt];
    for _ in 0..kt.min(kp) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in (0..kt).filter(|&i| !used_t[i]) {
            for j in (0..kp).filter(|&j| map[j].is_none()) {
                if conf[(i, j)] > best.0 {
                    best = (conf[(i, j)], i, j);
                }
            }
        }
        used_t[best.1] = true;
        map[best.2] = Some(best.1);
    }
    map
}

/// Accuracy after greedy label alignment over the steps in `idx` (all
/// steps when `None`).
pub fn segmentation_accuracy(truth: &[usize], pred: &[usize], idx: Option<&[usize]>) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} true labels vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    let all: Vec<usize>;
    let idx = match idx {
        Some(i) => i,
        None => {
            all = (0..truth.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Ok(1.0);
    }
    let conf = confusion(truth, pred, idx);
    let map = align_labels(&conf);
    let hits = idx.iter().filter(|&&t| map[pred[t]] == Some(truth[t])).count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Run lengths of each maximal constant stretch, tagged by state. The
/// first and last runs are censored and dropped.
pub fn state_durations(z: &[usize]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=z.len() {
        if t == z.len() || z[t] != z[start] {
            runs.push((z[start], t - start));
            start = t;
        }
    }
    if runs.len() <= 2 {
        return Vec::new();
    }
    runs[1..runs.len() - 1].to_vec()
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct DurationStats {
    pub count: usize,
    pub mean: f64,
    pub cv: f64,
}

pub fn duration_stats(durations: &[usize]) -> DurationStats {
    let n = durations.len();
    if n == 0 {
        return DurationStats {
            count: 0,
            mean: f64::NAN,
            cv: f64::NAN,
        };
    }
    let mean = durations.iter().sum::<usize>() as f64 / n as f64;
    let var = durations.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    DurationStats {
        count: n,
        mean,
        cv: var.sqrt() / mean,
    }
}

/// Duration statistics pooled over states and per state.
pub fn duration_summary(z: &[usize], k: usize) -> (DurationStats, Vec<DurationStats>) {
    let runs = state_durations(z);
    let pooled: Vec<usize> = runs.iter().map(|r| r.1).collect();
    let per = (0..k)
        .map(|s| {
            let d: Vec<usize> = runs.iter().filter(|r| r.0 == s).map(|r| r.1).collect();
            duration_stats(&d)
        })
        .collect();
    (duration_stats(&pooled), per)
}

/// CV of a geometric duration with the given mean, `sqrt(1 - 1/mean)`.
pub fn geometric_cv(mean: f64) -> f64 {
    (1.0 - 1.0 / mean).max(0.0).sqrt()
}

/// Mean absolute difference of output `n` over the steps in `idx`.
pub fn calibration_error(est: &[DVector<f64>], truth: &[DVector<f64>], n: usize, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&t| (est[t][n] - truth[t][n]).abs()).sum::<f64>() / idx.len() as f64
}

/// RMSE of the best affine map from the inferred path onto the true one.
/// The latent space is only identified up to an invertible transform, so
/// this is the meaningful recovery error.
pub fn affine_recovery_error(est: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::Dimension("paths must have equal, nonzero length".into()));
    }
    let q = est[0].len() + 1;
    let p = truth[0].len();
    let mut xx = DMatrix::zeros(q, q);
    let mut yx = DMatrix::zeros(p, q);
    for (e, t) in est.iter().zip(truth) {
        let phi = augment_one(e);
        xx.ger(1.0, &phi, &phi, 1.0);
        yx.ger(1.0, t, &phi, 1.0);
    }
    for i in 0..q {
        xx[(i, i)] += 1e-9;
    }
    let w = xx
        .clone()
        .try_inverse()
        .map(|inv| &yx * inv)
        .ok_or_else(|| Error::NotPositiveDefinite("affine alignment".into()))?;
    let sse: f64 = est
        .iter()
        .zip(truth)
        .map(|(e, t)| (t - &w * augment_one(e)).norm_squared())
        .sum();
    Ok((sse / (est.len() * p) as f64).sqrt())
}
