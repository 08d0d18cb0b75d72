//! Samplers and conjugate-update kernels for the distribution families the
//! model uses.

mod dirichlet;
mod gaussian;
mod mniw;
mod polya_gamma;

pub use dirichlet::{dirichlet_posterior, sample_dirichlet, DirichletParams};
pub use gaussian::GaussianInfo;
pub use mniw::{
    mniw_posterior, mniw_posterior_stats, sample_inv_wishart, sample_matrix_normal, sample_mniw, sample_wishart,
    MniwExpectations, MniwParams, MniwStats,
};
pub use polya_gamma::{pg_mean, pg_variance, sample_pg, sample_pg1, PolyaGammaParams, LOGIT_CLAMP};
