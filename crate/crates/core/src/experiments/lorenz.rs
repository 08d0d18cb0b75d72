//! Lorenz attractor observed through a Bernoulli GLM.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::std_normal_mat;
use crate::model::{Dataset, EmissionFamily};
use crate::stickbreak::sigmoid;

#[derive(Debug, Clone)]
pub struct LorenzConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Time between emitted samples.
    pub dt: f64,
    /// RK4 steps per emitted sample.
    pub substeps: usize,
    pub n: usize,
    /// Seed for the GLM weights.
    pub glm_seed: u64,
    /// Spread of the GLM biases.
    pub bias_sd: f64,
    /// Integration steps discarded before the first sample.
    pub burn_in: usize,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 28.0,
            gamma: 8.0 / 3.0,
            dt: 0.01,
            substeps: 10,
            n: 20,
            glm_seed: 0,
            bias_sd: 0.5,
            burn_in: 1000,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.substeps == 0 || self.n == 0 {
            return Err(Error::InvalidParameter(
                "Lorenz dt, substeps and N must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn derivative(&self, s: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.alpha * (s[1] - s[0]),
            s[0] * (self.beta - s[2]) - s[1],
            s[0] * s[1] - self.gamma * s[2],
        )
    }

    pub fn rk4_step(&self, s: &Vector3<f64>, h: f64) -> Vector3<f64> {
        let k1 = self.derivative(s);
        let k2 = self.derivative(&(s + k1 * (h / 2.0)));
        let k3 = self.derivative(&(s + k2 * (h / 2.0)));
        let k4 = self.derivative(&(s + k3 * h));
        s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Raw trajectory sampled every `dt`, starting from `start`.
    pub fn integrate(&self, start: Vector3<f64>, t_len: usize) -> Vec<Vector3<f64>> {
        let h = self.dt / self.substeps as f64;
        let mut s = start;
        let mut out = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            out.push(s);
            for _ in 0..self.substeps {
                s = self.rk4_step(&s, h);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LorenzData {
    /// Standardized latent path.
    pub x: Vec<DVector<f64>>,
    /// Lobe label: 0 for x1 > 0, 1 otherwise.
    pub z: Vec<usize>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    /// True event probabilities sigma(C x + d).
    pub rho: Vec<DVector<f64>>,
    pub data: Dataset,
}

/// Simulate the attractor, standardize it, and emit Bernoulli outputs.
/// `mask` is a half-open 0-based interval of held-out steps.
pub fn gen_lorenz(cfg: &LorenzConfig, t_len: usize, mask: Option<(usize, usize)>, seed: u64) -> Result<LorenzData> {
    cfg.validate()?;
    if t_len == 0 {
        return Err(Error::InvalidParameter("T must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        20.0 + rng.random_range(-1.0..1.0),
    );
    let warm = cfg.integrate(start, cfg.burn_in + 1);
    let raw = cfg.integrate(*warm.last().expect("nonempty"), t_len);
    let n = t_len as f64;
    let mean = raw.iter().fold(Vector3::zeros(), |a, s| a + s) / n;
    let var = raw
        .iter()
        .fold(Vector3::zeros(), |a, s| a + (s - mean).component_mul(&(s - mean)))
        / n;
    let sd = var.map(|v| v.sqrt().max(1e-12));
    let x: Vec<DVector<f64>> = raw
        .iter()
        .map(|s| DVector::from_iterator(3, (s - mean).component_div(&sd).iter().cloned()))
        .collect();
    let z = raw.iter().map(|s| if s[0] > 0.0 { 0 } else { 1 }).collect();

    let mut glm_rng = ChaCha8Rng::seed_from_u64(cfg.glm_seed);
    let c = std_normal_mat(cfg.n, 3, &mut glm_rng);
    let d = DVector::from_fn(cfg.n, |_, _| {
        glm_rng.sample::<f64, _>(rand_distr::StandardNormal) * cfg.bias_sd
    });
    let rho: Vec<DVector<f64>> = x.iter().map(|xt| (&c * xt + &d).map(sigmoid)).collect();
    let y = rho
        .iter()
        .map(|r| r.map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }))
        .collect();
    let mut data = Dataset::fully_observed(y, EmissionFamily::Bernoulli)?;
    if let Some((a, b)) = mask {
        data.mask_interval(a, b)?;
    }
    Ok(LorenzData { x, z, c, d, rho, data })
}
