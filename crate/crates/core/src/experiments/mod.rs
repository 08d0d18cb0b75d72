pub mod geweke;
pub mod lorenz;
pub mod metrics;
pub mod nascar;
