mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rslds::distributions::MniwParams;
use rslds::experiments::metrics::segmentation_accuracy;
use rslds::experiments::nascar::gen_nascar;
use rslds::gibbs::score_joint;
use rslds::init::*;
use rslds::linalg::std_normal_vec;
use rslds::model::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn orthonormal(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0));
    a.qr().q()
}

/// Cosine of the largest principal angle between two column spaces.
fn min_principal_cos(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (qa, qb) = (a.clone().qr().q(), b.clone().qr().q());
    let s = (qa.transpose() * qb).singular_values();
    s.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn low_rank(n: usize, m: usize, t_len: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>, Vec<DVector<f64>>) {
    let c = orthonormal(n, m, seed) * 2.0;
    let d = DVector::from_fn(n, |i, _| i as f64 - 1.0);
    let mut r = rng(seed + 1);
    let y = (0..t_len).map(|_| &c * std_normal_vec(m, &mut r) + &d).collect();
    (c, d, y)
}

fn vague_dynamics(m: usize) -> MniwParams {
    MniwParams::new(
        DMatrix::zeros(m, m + 1),
        DMatrix::identity(m + 1, m + 1) * 1e6,
        DMatrix::identity(m, m) * 1e-3,
        m as f64 + 2.0,
    )
    .unwrap()
}

#[test]
fn ppca_recovers_a_noiseless_subspace() {
    let (c, _, y) = low_rank(5, 2, 300, 0);
    let fit = ppca(&y, &vec![true; 300], 2).unwrap();
    for t in 0..300 {
        assert!((&fit.c * &fit.x[t] + &fit.d - &y[t]).amax() < 1e-8);
    }
    let cos = min_principal_cos(&fit.c, &c).min(1.0);
    assert!(cos.acos() < 1e-6, "angle {}", cos.acos());
}

#[test]
fn ppca_full_rank_reconstructs_the_data() {
    let mut r = rng(2);
    let y: Vec<_> = (0..100).map(|_| std_normal_vec(3, &mut r)).collect();
    let fit = ppca(&y, &[true; 100], 3).unwrap();
    for t in 0..100 {
        assert!((&fit.c * &fit.x[t] + &fit.d - &y[t]).amax() < 1e-8);
    }
}

#[test]
fn ppca_is_equivariant_to_output_order() {
    let (_, _, y) = low_rank(4, 2, 200, 3);
    let mut r = rng(4);
    let y: Vec<_> = y.iter().map(|v| v + std_normal_vec(4, &mut r) * 0.1).collect();
    let perm = [2, 0, 3, 1];
    let yp: Vec<_> = y.iter().map(|v| DVector::from_fn(4, |i, _| v[perm[i]])).collect();
    let a = ppca(&y, &[true; 200], 2).unwrap();
    let b = ppca(&yp, &[true; 200], 2).unwrap();
    for t in 0..200 {
        let ra = &a.c * &a.x[t] + &a.d;
        let rb = &b.c * &b.x[t] + &b.d;
        for i in 0..4 {
            assert!((rb[i] - ra[perm[i]]).abs() < 1e-9);
        }
    }
    let pc = DMatrix::from_fn(4, 2, |i, j| a.c[(perm[i], j)]);
    assert!(min_principal_cos(&pc, &b.c) > 1.0 - 1e-10);
    assert!((a.loglik - b.loglik).abs() < 1e-8 * a.loglik.abs());
}

#[test]
fn ppca_likelihood_grows_with_m() {
    let mut r = rng(5);
    let (_, _, y) = low_rank(6, 3, 250, 6);
    let y: Vec<_> = y.iter().map(|v| v + std_normal_vec(6, &mut r) * 0.3).collect();
    let ll: Vec<f64> = (1..=4).map(|m| ppca(&y, &vec![true; 250], m).unwrap().loglik).collect();
    for w in ll.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{ll:?}");
    }
}

#[test]
fn ppca_ignores_masked_rows_and_fills_them() {
    let (_, _, y) = low_rank(4, 2, 120, 7);
    let mut mask = vec![true; 120];
    for m in &mut mask[40..60] {
        *m = false;
    }
    let a = ppca(&y, &mask, 2).unwrap();
    let mut junk = y.clone();
    for v in &mut junk[40..60] {
        *v = DVector::from_element(4, 1e6);
    }
    let b = ppca(&junk, &mask, 2).unwrap();
    assert_eq!(a.c, b.c);
    assert_eq!(a.x, b.x);
    assert!(a.x[50].iter().all(|v| v.is_finite()));
    assert!(ppca(&y[..1], &[true], 2).is_err());
}

#[test]
fn single_state_arhmm_is_least_squares() {
    let mut r = rng(8);
    let a = DMatrix::from_row_slice(2, 2, &[0.95, 0.1, -0.1, 0.95]);
    let mut x = vec![DVector::from_vec(vec![1.0, 0.0])];
    for _ in 0..400 {
        let next = &a * x.last().unwrap() + std_normal_vec(2, &mut r) * 0.1;
        x.push(next);
    }
    let fit = arhmm_init(&x, 1, 5, &vague_dynamics(2), &InitConfig::default()).unwrap();
    assert!(fit.z.iter().all(|&z| z == 0));
    // ordinary least squares on [x_t; 1]
    let phi = DMatrix::from_fn(400, 3, |t, j| if j < 2 { x[t][j] } else { 1.0 });
    let target = DMatrix::from_fn(400, 2, |t, j| x[t + 1][j]);
    let ols = (phi.transpose() * &phi)
        .cholesky()
        .unwrap()
        .solve(&(phi.transpose() * target))
        .transpose();
    assert!((fit.dynamics[0].weights() - ols).amax() < 1e-6);
}

fn two_slopes(seed: u64) -> (Vec<DVector<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut x = vec![DVector::zeros(1)];
    let mut z = vec![0];
    for t in 1..400 {
        let state = (t / 80) % 2;
        let slope = if state == 0 { 1.0 } else { -1.0 };
        let next = x.last().unwrap().add_scalar(slope) + std_normal_vec(1, &mut r) * 0.05;
        x.push(next);
        z.push(state);
    }
    (x, z)
}

#[test]
fn two_slope_changepoints_are_found() {
    let (x, truth) = two_slopes(9);
    let fit = arhmm_init(&x, 2, 30, &vague_dynamics(1), &InitConfig::default()).unwrap();
    let changes = |z: &[usize]| (1..z.len()).filter(|&t| z[t] != z[t - 1]).collect::<Vec<_>>();
    let (want, got) = (changes(&truth), changes(&fit.z));
    assert_eq!(want.len(), got.len(), "{got:?}");
    for (a, b) in want.iter().zip(&got) {
        assert!(a.abs_diff(*b) <= 2);
    }
}

#[test]
fn em_objective_never_decreases() {
    let (x, truth) = two_slopes(10);
    let h = Hypers::default_for(1, 1).unwrap();
    // start from a poor segmentation so EM has work to do
    let labels: Vec<usize> = truth[1..]
        .iter()
        .enumerate()
        .map(|(t, &z)| if t % 7 == 0 { 1 - z } else { z })
        .collect();
    let fit = run_em(&x, &labels, 2, 25, &h.dynamics).unwrap();
    for w in fit.objective.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{:?}", fit.objective);
    }
}

#[test]
fn separable_classes_are_fit_exactly() {
    let mut r = rng(11);
    let x: Vec<_> = (0..200).map(|_| std_normal_vec(2, &mut r) * 2.0).collect();
    let z: Vec<usize> = x.iter().map(|v| usize::from(v[0] - 0.5 * v[1] > 0.3)).collect();
    let dl = fit_decision_list(&x, &z, 2, 1e-2).unwrap();
    let hits = x.iter().zip(&z).filter(|(v, &l)| dl.predict(v) == l).count();
    assert_eq!(hits, 200);
    assert_eq!(dl.predicates.len(), 1);
}

#[test]
fn greedy_list_matches_exhaustive_search_on_clusters() {
    let (x, z) = common::three_clusters(12);
    let dl = fit_decision_list(&x, &z, 3, 1e-2).unwrap();
    let (best, best_ll) = common::exhaustive_order(&x, &z, 3, 1e-2);
    assert_eq!(dl.outputs[0], best[0]);
    assert!((sequential_loglik(&x, &z, &dl.outputs, 1e-2).unwrap() - best_ll).abs() < 1e-6);
    assert!((dl.total_loglik() - best_ll).abs() < 1e-6);
    let inv = dl.inverse();
    for i in 0..3 {
        assert_eq!(inv[dl.outputs[i]], i);
        assert_eq!(dl.outputs[inv[i]], i);
    }
}

#[test]
fn one_class_levels_get_the_constant_predicate() {
    let x: Vec<_> = (0..10).map(|t| DVector::from_element(1, t as f64)).collect();
    let dl = fit_decision_list(&x, &[2; 10], 3, 1e-2).unwrap();
    assert_eq!(dl.outputs[0], 2);
    assert_eq!(dl.predicates[0][1], CONST_TRUE_BIAS);
    let mut outs = dl.outputs.clone();
    outs.sort();
    assert_eq!(outs, vec![0, 1, 2]);
    assert!(fit_decision_list(&x, &[3; 10], 3, 1e-2).is_err());
}

#[test]
fn identity_list_passes_the_arhmm_through() {
    let (params, path, data) = gen_nascar(300, 13).unwrap();
    let h = Hypers::default_for(2, data.dim()).unwrap();
    let fit = arhmm_init(&path.x, 4, 10, &h.dynamics, &InitConfig::default()).unwrap();
    let dl = DecisionList {
        outputs: vec![0, 1, 2, 3],
        predicates: vec![DVector::from_vec(vec![0.0, 0.0, 1.0]); 3],
        level_loglik: vec![0.0; 3],
    };
    let out = assemble_init(
        VariantTag::RecurrentSlds,
        &data,
        path.x.clone(),
        params.emission.clone(),
        &fit,
        &dl,
        &h,
    )
    .unwrap();
    assert_eq!(out.path.z, fit.z);
    assert_eq!(out.params.dynamics, fit.dynamics);
    assert_eq!(out.params.permutation, vec![0, 1, 2, 3]);
}

#[test]
fn relabeling_preserves_the_markov_joint() {
    let mut r = rng(14);
    let h = Hypers::default_for(2, 3).unwrap();
    let p = sample_prior(&h, 3, 2, 3, VariantTag::StandardSlds, EmissionFamily::Gaussian, &mut r).unwrap();
    let (path, data) = simulate(&p, 60, None, &mut r).unwrap();
    let perm = [1, 2, 0];
    let q = p.relabel(&perm).unwrap();
    let mut inv = [0; 3];
    for (i, &o) in perm.iter().enumerate() {
        inv[o] = i;
    }
    let relabeled = LatentPath {
        z: path.z.iter().map(|&s| inv[s]).collect(),
        x: path.x.clone(),
    };
    let a = score_joint(&p, &path, &data).unwrap();
    let b = score_joint(&q, &relabeled, &data).unwrap();
    assert!((a - b).abs() < 1e-10 * a.abs());
}

#[test]
fn initialize_yields_valid_models_for_every_variant() {
    let (_, _, data) = gen_nascar(400, 15).unwrap();
    for v in variants::registry() {
        if v.tag() == VariantTag::RecurrentArhmm {
            continue;
        }
        let h = Hypers::default_for(2, data.dim()).unwrap();
        let init = initialize(&data, v.tag(), 4, 2, &h, &InitConfig::default()).unwrap();
        init.params.validate().unwrap();
        assert_eq!(init.path.z.len(), 400);
        let doc = init.to_json();
        assert_eq!(doc["z_init"].as_array().unwrap().len(), 400);
        assert_eq!(doc["x_init"].as_array().unwrap().len(), 400);
    }
}

#[test]
fn bernoulli_and_observed_x_pipelines() {
    let mut r = rng(16);
    let h = Hypers::default_for(2, 6).unwrap();
    let p = sample_prior(
        &h,
        2,
        2,
        6,
        VariantTag::RecurrentSlds,
        EmissionFamily::Bernoulli,
        &mut r,
    )
    .unwrap();
    let (_, mut data) = simulate(&p, 300, None, &mut r).unwrap();
    data.mask_interval(100, 130).unwrap();
    let init = initialize(&data, VariantTag::RecurrentSlds, 2, 2, &h, &InitConfig::default()).unwrap();
    assert!(matches!(init.params.emission, Emission::Bernoulli { .. }));

    let ha = Hypers::default_for(2, 2).unwrap();
    let ar = sample_prior(
        &ha,
        2,
        2,
        2,
        VariantTag::RecurrentArhmm,
        EmissionFamily::Gaussian,
        &mut r,
    )
    .unwrap();
    let (_, data) = simulate(&ar, 200, None, &mut r).unwrap();
    let init = initialize(&data, VariantTag::RecurrentArhmm, 2, 2, &ha, &InitConfig::default()).unwrap();
    assert_eq!(init.path.x, data.y);
}

#[test]
fn nascar_initialization_segments_well() {
    let (_, path, data) = gen_nascar(1000, 0).unwrap();
    let h = rslds::experiments::nascar::fit_hypers().unwrap();
    let init = initialize(&data, VariantTag::RecurrentSlds, 4, 2, &h, &InitConfig::default()).unwrap();
    let acc = segmentation_accuracy(&path.z, &init.path.z, None).unwrap();
    assert!(acc >= 0.7, "accuracy {acc}");
}
