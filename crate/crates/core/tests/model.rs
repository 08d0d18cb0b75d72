use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rslds::distributions::MniwParams;
use rslds::gibbs::score_joint;
use rslds::linalg::mvn_logpdf;
use rslds::model::*;
use rslds::stickbreak::{pi_sb, sigmoid};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn prior_draw(variant: VariantTag, k: usize, m: usize, n: usize, family: EmissionFamily, seed: u64) -> ModelParams {
    let h = Hypers::default_for(m, n).unwrap();
    sample_prior(&h, k, m, n, variant, family, &mut rng(seed)).unwrap()
}

fn counts(p: &ModelParams, z: usize, x: &DVector<f64>, draws: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut c = vec![0.0; p.k];
    for _ in 0..draws {
        c[step_discrete(p, z, x, &mut r)] += 1.0;
    }
    c
}

fn within_se(c: &[f64], pmf: &DVector<f64>, n: usize, nse: f64) {
    for (j, &cj) in c.iter().enumerate() {
        let p = pmf[j];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (cj / n as f64 - p).abs() <= nse * se + 1e-12,
            "state {j}: {} vs {p}",
            cj / n as f64
        );
    }
}

#[test]
fn prior_mean_recurrence_visits_states_uniformly() {
    let mut p = prior_draw(VariantTag::RecurrentSlds, 4, 2, 2, EmissionFamily::Gaussian, 0);
    let mean = p.strategy().weight_prior_mean(4, 2);
    for w in p.transitions.weights.iter_mut() {
        w.copy_from(&mean);
    }
    let n = 100_000;
    let c = counts(&p, 2, &DVector::from_vec(vec![3.0, -1.0]), n, 1);
    within_se(&c, &DVector::from_element(4, 0.25), n, 3.0);
}

#[test]
fn deterministic_markov_row_always_lands_on_its_state() {
    let mut p = prior_draw(VariantTag::StandardSlds, 3, 1, 1, EmissionFamily::Gaussian, 2);
    let mut rows = DMatrix::from_element(3, 3, 0.0);
    rows[(0, 2)] = 1.0;
    rows[(1, 0)] = 1.0;
    rows[(2, 2)] = 1.0;
    p.transitions.rows = Some(rows);
    let mut r = rng(3);
    let x = DVector::from_element(1, 0.3);
    for _ in 0..1000 {
        assert_eq!(step_discrete(&p, 0, &x, &mut r), 2);
        assert_eq!(step_discrete(&p, 1, &x, &mut r), 0);
    }
}

#[test]
fn saturated_recurrence_picks_the_aligned_state() {
    let mut p = prior_draw(VariantTag::RecurrenceOnly, 3, 2, 2, EmissionFamily::Gaussian, 4);
    let x = DVector::from_vec(vec![10.0, 0.0]);
    for target in 0..3 {
        let mut w = DMatrix::zeros(2, 3);
        for stick in 0..2 {
            w[(stick, 0)] = if stick == target { 100.0 } else { -100.0 };
        }
        p.transitions.weights[0] = w;
        let c = counts(&p, 1, &x, 10_000, 5 + target as u64);
        assert!(c[target] / 10_000.0 >= 1.0 - 1e-4);
    }
}

#[test]
fn transition_frequencies_match_the_pmf() {
    for (i, variant) in [
        VariantTag::RecurrentSlds,
        VariantTag::SharedRslds,
        VariantTag::RecurrentSticky,
    ]
    .into_iter()
    .enumerate()
    {
        let p = prior_draw(variant, 3, 2, 2, EmissionFamily::Gaussian, 10 + i as u64);
        let x = DVector::from_vec(vec![0.05, -0.02]);
        let n = 1_000_000;
        let c = counts(&p, 1, &x, n, 20 + i as u64);
        within_se(&c, &p.trans_probs(1, &x), n, 4.0);
    }
}

#[test]
fn noiseless_dynamics_are_exact() {
    let mut p = prior_draw(VariantTag::RecurrentSlds, 2, 2, 2, EmissionFamily::Gaussian, 6);
    let tiny = DMatrix::identity(2, 2) * 1e-30;
    p.dynamics[0] = Dynamics {
        a: DMatrix::identity(2, 2),
        b: DVector::zeros(2),
        q: tiny.clone(),
    };
    p.dynamics[1] = Dynamics {
        a: DMatrix::zeros(2, 2),
        b: DVector::from_vec(vec![1.0, 2.0]),
        q: tiny,
    };
    let x = DVector::from_vec(vec![0.7, -3.0]);
    let mut r = rng(7);
    assert!((step_continuous(&p, 0, &x, &mut r).unwrap() - &x).amax() < 1e-12);
    assert!((step_continuous(&p, 1, &x, &mut r).unwrap() - DVector::from_vec(vec![1.0, 2.0])).amax() < 1e-12);
}

#[test]
fn dynamics_noise_has_covariance_q() {
    let p = prior_draw(VariantTag::RecurrentSlds, 2, 2, 2, EmissionFamily::Gaussian, 8);
    let x = DVector::from_vec(vec![1.0, -0.5]);
    let mean = p.dynamics[1].mean(&x);
    let q = &p.dynamics[1].q;
    let n = 100_000;
    let mut r = rng(9);
    let mut cov = DMatrix::<f64>::zeros(2, 2);
    for _ in 0..n {
        let e = step_continuous(&p, 1, &x, &mut r).unwrap() - &mean;
        cov += &e * e.transpose();
    }
    cov /= n as f64;
    for i in 0..2 {
        for j in 0..2 {
            let se = ((q[(i, i)] * q[(j, j)] + q[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((cov[(i, j)] - q[(i, j)]).abs() < 5.0 * se);
        }
    }
}

#[test]
fn emissions() {
    let mut p = prior_draw(VariantTag::RecurrentSlds, 2, 2, 3, EmissionFamily::Gaussian, 11);
    let c = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, -1.0, 2.0, 3.0]);
    let d = DVector::from_vec(vec![0.1, 0.2, 0.3]);
    p.emission = Emission::Gaussian {
        c: c.clone(),
        d: d.clone(),
        s: DMatrix::identity(3, 3) * 1e-30,
    };
    let x = DVector::from_vec(vec![0.4, -0.6]);
    let y = emit(&p, 0, &x, &mut rng(12)).unwrap();
    assert!((y - (&c * &x + &d)).amax() < 1e-12);

    // logits 0 and 3
    let mut b = prior_draw(VariantTag::RecurrentSlds, 2, 1, 2, EmissionFamily::Bernoulli, 13);
    b.emission = Emission::Bernoulli {
        c: DMatrix::from_element(2, 1, 1.0),
        d: DVector::from_vec(vec![-1.0, 2.0]),
    };
    let x = DVector::from_element(1, 1.0);
    let n = 1_000_000;
    let mut r = rng(14);
    let mut ones = DVector::<f64>::zeros(2);
    for _ in 0..n {
        ones += emit(&b, 0, &x, &mut r).unwrap();
    }
    for (i, p) in [0.5, sigmoid(3.0)].into_iter().enumerate() {
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((ones[i] / n as f64 - p).abs() < 4.0 * se);
    }
    assert!((sigmoid(3.0) - 0.9526).abs() < 1e-4);
}

#[test]
fn simulate_length_and_determinism() {
    let p = prior_draw(VariantTag::RecurrentSlds, 3, 2, 4, EmissionFamily::Gaussian, 15);
    let (path, data) = simulate(&p, 1, None, &mut rng(16)).unwrap();
    assert_eq!((path.z.len(), path.x.len(), data.len()), (1, 1, 1));
    assert!(simulate(&p, 0, None, &mut rng(16)).is_err());
    let a = simulate(&p, 300, None, &mut rng(17)).unwrap();
    let b = simulate(&p, 300, None, &mut rng(17)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.y, b.1.y);

    let ar = prior_draw(VariantTag::RecurrentArhmm, 2, 2, 2, EmissionFamily::Gaussian, 18);
    let (path, data) = simulate(&ar, 50, None, &mut rng(19)).unwrap();
    assert_eq!(path.x, data.y);
}

#[test]
fn score_joint_is_the_sum_of_step_densities() {
    for (i, (variant, family)) in [
        (VariantTag::RecurrentSlds, EmissionFamily::Gaussian),
        (VariantTag::RecurrentSticky, EmissionFamily::Bernoulli),
        (VariantTag::StandardSlds, EmissionFamily::Gaussian),
    ]
    .into_iter()
    .enumerate()
    {
        let p = prior_draw(variant, 3, 2, 3, family, 30 + i as u64);
        let (path, mut data) = simulate(&p, 40, None, &mut rng(40 + i as u64)).unwrap();
        data.mask_interval(10, 15).unwrap();
        let mut direct = -(3f64).ln() + mvn_logpdf(&path.x[0], &DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        for t in 0..40 {
            if t > 0 {
                direct += p.trans_probs(path.z[t - 1], &path.x[t - 1])[path.z[t]].ln();
                let dy = &p.dynamics[path.z[t]];
                direct += mvn_logpdf(&path.x[t], &dy.mean(&path.x[t - 1]), &dy.q).unwrap();
            }
            if !data.mask[t] {
                continue;
            }
            match &p.emission {
                Emission::Gaussian { c, d, s } => {
                    direct += mvn_logpdf(&data.y[t], &(c * &path.x[t] + d), s).unwrap();
                }
                Emission::Bernoulli { c, d } => {
                    let nu = c * &path.x[t] + d;
                    for n in 0..3 {
                        let s = sigmoid(nu[n]);
                        direct += if data.y[t][n] == 1.0 { s.ln() } else { (1.0 - s).ln() };
                    }
                }
                Emission::Identity => unreachable!(),
            }
        }
        let score = score_joint(&p, &path, &data).unwrap();
        assert!(score.is_finite());
        assert!(
            (score - direct).abs() <= 1e-8 * direct.abs(),
            "{variant:?}: {score} vs {direct}"
        );
    }
}

#[test]
fn masking_one_step_removes_exactly_its_density() {
    let p = prior_draw(VariantTag::RecurrentSlds, 2, 2, 3, EmissionFamily::Gaussian, 50);
    let (path, data) = simulate(&p, 20, None, &mut rng(51)).unwrap();
    let mut masked = data.clone();
    masked.mask_interval(7, 8).unwrap();
    let Emission::Gaussian { c, d, s } = &p.emission else {
        unreachable!()
    };
    let lp = mvn_logpdf(&data.y[7], &(c * &path.x[7] + d), s).unwrap();
    let diff = score_joint(&p, &path, &data).unwrap() - score_joint(&p, &path, &masked).unwrap();
    assert!((diff - lp).abs() < 1e-10);
}

#[test]
fn recurrent_model_without_recurrence_is_markov() {
    let k = 3;
    let r = prior_draw(VariantTag::RecurrentSlds, k, 2, 2, EmissionFamily::Gaussian, 60);
    let mut r0 = r.clone();
    for w in r0.transitions.weights.iter_mut() {
        w.columns_mut(0, 2).fill(0.0);
    }
    let mut markov = prior_draw(VariantTag::StandardSlds, k, 2, 2, EmissionFamily::Gaussian, 61);
    markov.transitions.rows = Some(DMatrix::from_fn(k, k, |i, j| {
        pi_sb(r0.transitions.weights[i].column(2).as_slice())[j]
    }));
    let mut g = rng(62);
    for _ in 0..100 {
        let z = g.random_range(0..k);
        let x = DVector::from_fn(2, |_, _| g.random_range(-5.0..5.0));
        assert_eq!(r0.trans_probs(z, &x), markov.trans_probs(z, &x));
    }
}

#[test]
fn shared_and_recurrence_only_agree_when_offsets_are_equal() {
    let k = 3;
    let ro = prior_draw(VariantTag::RecurrenceOnly, k, 2, 2, EmissionFamily::Gaussian, 70);
    let mut sh = prior_draw(VariantTag::SharedRslds, k, 2, 2, EmissionFamily::Gaussian, 71);
    let w = &ro.transitions.weights[0];
    sh.transitions.weights[0] = DMatrix::from_fn(k - 1, 2 + k, |i, j| if j < 2 { w[(i, j)] } else { w[(i, 2)] });
    let mut g = rng(72);
    for _ in 0..100 {
        let z = g.random_range(0..k);
        let x = DVector::from_fn(2, |_, _| g.random_range(-5.0..5.0));
        assert_eq!(ro.trans_probs(z, &x), sh.trans_probs(z, &x));
    }
}

#[test]
fn saturated_stay_probability_never_leaves() {
    let mut p = prior_draw(VariantTag::RecurrentSticky, 3, 2, 2, EmissionFamily::Gaussian, 80);
    p.transitions.weights[1] = DMatrix::from_row_slice(1, 3, &[100.0, 0.0, 0.0]);
    let x = DVector::from_vec(vec![10.0, 1.0]);
    let mut g = rng(81);
    for _ in 0..10_000 {
        assert_eq!(step_discrete(&p, 1, &x, &mut g), 1);
    }
}

#[test]
fn degenerate_dynamics_prior_pins_the_spectral_radius() {
    let mut h = Hypers::default_for(3, 2).unwrap();
    let mut m0 = DMatrix::zeros(3, 4);
    m0.view_mut((0, 0), (3, 3)).copy_from(&(DMatrix::identity(3, 3) * 0.99));
    h.dynamics = MniwParams::new(m0, DMatrix::identity(4, 4) * 1e-20, DMatrix::identity(3, 3) * 0.1, 5.0).unwrap();
    let p = sample_prior(
        &h,
        3,
        3,
        2,
        VariantTag::RecurrentSlds,
        EmissionFamily::Gaussian,
        &mut rng(90),
    )
    .unwrap();
    for d in &p.dynamics {
        // every eigenvalue lies within ||A - 0.99 I||_2 of 0.99
        let gap = (&d.a - DMatrix::identity(3, 3) * 0.99).norm();
        assert!(gap < 1e-6);
    }
}

#[test]
fn json_round_trips_every_variant() {
    for (i, v) in variants::registry().iter().enumerate() {
        let k = if v.tag() == VariantTag::RecurrentSticky { 3 } else { 2 };
        let family = if i % 2 == 0 {
            EmissionFamily::Gaussian
        } else {
            EmissionFamily::Bernoulli
        };
        let n = if v.tag() == VariantTag::RecurrentArhmm { 2 } else { 3 };
        let p = prior_draw(v.tag(), k, 2, n, family, 100 + i as u64);
        let text = serde_json::to_string(&p.to_json()).unwrap();
        let back = ModelParams::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, p, "{}", v.name());
        let (path, _) = simulate(&p, 10, None, &mut rng(1)).unwrap();
        assert_eq!(LatentPath::from_json(&path.to_json()).unwrap(), path);
    }
    let p = prior_draw(VariantTag::RecurrentSlds, 2, 2, 2, EmissionFamily::Gaussian, 0);
    let doc = p.to_json();
    for key in ["A", "b", "Q", "C", "d", "S", "R", "r", "variant", "K", "M", "N"] {
        assert!(doc.get(key).is_some(), "{key}");
    }
}

#[test]
fn relabel_permutes_dynamics_and_rows() {
    let p = prior_draw(VariantTag::StandardSlds, 3, 1, 1, EmissionFamily::Gaussian, 110);
    assert_eq!(p.relabel(&[0, 1, 2]).unwrap(), p);
    let q = p.relabel(&[2, 0, 1]).unwrap();
    assert_eq!(q.dynamics[0], p.dynamics[2]);
    let (a, b) = (
        p.transitions.rows.as_ref().unwrap(),
        q.transitions.rows.as_ref().unwrap(),
    );
    assert_eq!(b[(0, 1)], a[(2, 0)]);
    assert_eq!(q.permutation, vec![2, 0, 1]);
    assert_eq!(q.relabel(&[1, 2, 0]).unwrap(), p);
    assert!(p.relabel(&[0, 0, 1]).is_err());
}

#[test]
fn datasets_are_validated() {
    let y = vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![0.5, 1.0])];
    assert!(Dataset::fully_observed(y.clone(), EmissionFamily::Bernoulli).is_err());
    assert!(Dataset::fully_observed(y.clone(), EmissionFamily::Gaussian).is_ok());
    assert!(Dataset::new(y.clone(), vec![true], EmissionFamily::Gaussian).is_err());
    let mut d = Dataset::fully_observed(y, EmissionFamily::Gaussian).unwrap();
    assert!(d.mask_interval(1, 5).is_err());
    d.mask_interval(1, 1).unwrap();
    assert_eq!(d.mask, vec![true, true]);
    d.mask_interval(0, 1).unwrap();
    assert_eq!(d.mask, vec![false, true]);
}

#[test]
fn sample_prior_checks_dimensions() {
    let h = Hypers::default_for(2, 2).unwrap();
    let mut r = rng(0);
    assert!(sample_prior(&h, 0, 2, 2, VariantTag::RecurrentSlds, EmissionFamily::Gaussian, &mut r).is_err());
    assert!(sample_prior(
        &h,
        1,
        2,
        2,
        VariantTag::RecurrentSticky,
        EmissionFamily::Gaussian,
        &mut r
    )
    .is_err());
    assert!(sample_prior(
        &h,
        2,
        2,
        3,
        VariantTag::RecurrentArhmm,
        EmissionFamily::Gaussian,
        &mut r
    )
    .is_err());
}
