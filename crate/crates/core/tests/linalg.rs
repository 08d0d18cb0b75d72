#[allow(unused_imports)]
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rslds::linalg::*;

#[test]
fn jitter_rescues_semidefinite() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    assert!(cholesky(&m, "psd").is_ok());
    let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(cholesky(&neg, "neg").is_err());
}

#[test]
fn info_sampling_moments() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let j = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let h = DVector::from_vec(vec![1.0, -1.0]);
    let cov = j.clone().try_inverse().unwrap();
    let mean = &cov * &h;
    let n = 100_000;
    let mut acc = DVector::zeros(2);
    for _ in 0..n {
        acc += sample_info(&j, &h, &mut rng).unwrap();
    }
    acc /= n as f64;
    for i in 0..2 {
        assert!((acc[i] - mean[i]).abs() < 4.0 * (cov[(i, i)] / n as f64).sqrt());
    }
}

#[test]
fn logsumexp_handles_neg_inf() {
    assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    assert!((logsumexp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
}
