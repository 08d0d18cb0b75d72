//! The "NASCAR" track: a 2-D latent state circling an oval, with two
//! straightaways that translate x and two turns that rotate it clockwise.
//! Each straightaway also pulls x2 back toward its lane at +-1; without
//! that the orbit radius random-walks and long runs drift onto the x2 = 0
//! split, where the two straightaways chatter.
//! Transitions depend on x only, through stick hyperplanes at the
//! quadrant boundaries of the oval.
//!
//! Stick order (0-based states):
//!   0 right turn   (x1 > 2),  rotate about (+2, 0)
//!   1 left turn    (x1 < -2), rotate about (-2, 0)
//!   2 top straight (x2 > 0),  move right
//!   3 bottom straight,        move left

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distributions::MniwParams;
use crate::error::Result;
use crate::linalg::std_normal_mat;
use crate::model::{simulate, Dataset, Dynamics, Emission, Hypers, LatentPath, ModelParams, Transitions, VariantTag};

pub const K: usize = 4;
pub const M: usize = 2;
pub const N: usize = 10;
pub const TURN_ANGLE: f64 = PI / 24.0;
pub const TURN_CENTER: f64 = 2.0;
pub const STRAIGHT_SPEED: f64 = 0.1;
/// Per-step pull of x2 toward the lane on a straightaway.
pub const LANE_PULL: f64 = 0.005;
pub const DYNAMICS_VAR: f64 = 1e-4;
pub const EMISSION_VAR: f64 = 1e-2;
/// Stick sharpness for the two turn hyperplanes and the straightaway split.
pub const TURN_GAIN: f64 = 100.0;
pub const SIDE_GAIN: f64 = 20.0;
/// Starting point on the top straightaway.
pub const START: [f64; 2] = [0.0, 1.0];

fn rotation_about(angle: f64, cx: f64) -> Dynamics {
    let (s, c) = angle.sin_cos();
    let a = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let center = DVector::from_vec(vec![cx, 0.0]);
    let b = &center - &a * &center;
    Dynamics {
        a,
        b,
        q: DMatrix::identity(2, 2) * DYNAMICS_VAR,
    }
}

fn straight(dx: f64, lane: f64) -> Dynamics {
    Dynamics {
        a: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 - LANE_PULL]),
        b: DVector::from_vec(vec![dx, LANE_PULL * lane]),
        q: DMatrix::identity(2, 2) * DYNAMICS_VAR,
    }
}

/// Ground-truth parameters. The emission matrix is drawn from `seed`.
pub fn nascar_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = std_normal_mat(N, M, &mut rng);
    let dynamics = vec![
        rotation_about(-TURN_ANGLE, TURN_CENTER),
        rotation_about(-TURN_ANGLE, -TURN_CENTER),
        straight(STRAIGHT_SPEED, 1.0),
        straight(-STRAIGHT_SPEED, -1.0),
    ];
    // rows: [R | r] for the three sticks
    let w = DMatrix::from_row_slice(
        3,
        3,
        &[
            TURN_GAIN,
            0.0,
            -TURN_GAIN * TURN_CENTER,
            -TURN_GAIN,
            0.0,
            -TURN_GAIN * TURN_CENTER,
            0.0,
            SIDE_GAIN,
            0.0,
        ],
    );
    ModelParams {
        variant: VariantTag::RecurrenceOnly,
        k: K,
        m: M,
        n: N,
        dynamics,
        emission: Emission::Gaussian {
            c,
            d: DVector::zeros(N),
            s: DMatrix::identity(N, N) * EMISSION_VAR,
        },
        transitions: Transitions {
            weights: vec![w],
            rows: None,
        },
        permutation: (0..K).collect(),
    }
}

/// Simulate `t_len` steps of the track.
pub fn gen_nascar(t_len: usize, seed: u64) -> Result<(ModelParams, LatentPath, Dataset)> {
    let params = nascar_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let x1 = DVector::from_row_slice(&START);
    let (path, data) = simulate(&params, t_len, Some(&x1), &mut rng)?;
    Ok((params, path, data))
}

/// Priors used to fit the track. The default dynamics prior (column
/// covariance 0.01 I around 0.99 I) pins the offsets b_k near zero, which
/// straightaways moving 0.1 per step cannot afford; a unit column
/// covariance leaves them free.
pub fn fit_hypers() -> Result<Hypers> {
    let mut h = Hypers::default_for(M, N)?;
    h.dynamics = MniwParams::new(
        h.dynamics.m0.clone(),
        DMatrix::identity(M + 1, M + 1),
        h.dynamics.s0.clone(),
        h.dynamics.n0,
    )?;
    Ok(h)
}
