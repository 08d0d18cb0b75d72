use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    pub alpha: DVector<f64>,
}

impl DirichletParams {
    pub fn new(alpha: DVector<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidParameter(
                "Dirichlet concentrations must be positive and finite".into(),
            ));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(k: usize, a: f64) -> Self {
        Self {
            alpha: DVector::from_element(k, a),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.alpha / self.alpha.sum()
    }

    /// E[ln π_k] = ψ(α_k) - ψ(Σ α)
    pub fn expected_log(&self) -> DVector<f64> {
        let total = digamma(self.alpha.sum());
        self.alpha.map(|a| digamma(a) - total)
    }

    pub fn kl(&self, other: &DirichletParams) -> f64 {
        let a0 = self.alpha.sum();
        let b0 = other.alpha.sum();
        let el = self.expected_log();
        ln_gamma(a0) - ln_gamma(b0)
            + self
                .alpha
                .iter()
                .zip(other.alpha.iter())
                .zip(el.iter())
                .map(|((a, b), e)| ln_gamma(*b) - ln_gamma(*a) + (a - b) * e)
                .sum::<f64>()
    }
}

/// `alpha + counts`, elementwise.
pub fn dirichlet_posterior(prior: &DirichletParams, counts: &[f64]) -> Result<DirichletParams> {
    if counts.len() != prior.alpha.len() {
        return Err(Error::Dimension(format!(
            "{} counts for a {}-category Dirichlet",
            counts.len(),
            prior.alpha.len()
        )));
    }
    if counts.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::InvalidParameter("counts must be non-negative".into()));
    }
    Ok(DirichletParams {
        alpha: DVector::from_fn(counts.len(), |i, _| prior.alpha[i] + counts[i]),
    })
}

pub fn sample_dirichlet<R: Rng + ?Sized>(params: &DirichletParams, rng: &mut R) -> DVector<f64> {
    let k = params.alpha.len();
    let mut g = DVector::from_fn(k, |i, _| {
        Gamma::new(params.alpha[i], 1.0).map(|d| d.sample(rng)).unwrap_or(0.0)
    });
    let total = g.sum();
    if total > 0.0 && total.is_finite() {
        g /= total;
    } else {
        // every gamma draw underflowed; fall back to the largest concentration
        let imax = params.alpha.argmax().0;
        g = DVector::zeros(k);
        g[imax] = 1.0;
    }
    g
}
