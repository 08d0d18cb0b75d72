pub mod distributions;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod gibbs;
pub mod init;
pub mod linalg;
pub mod messages;
pub mod model;
pub mod potentials;
pub mod stickbreak;
pub mod svi;

pub use error::{Error, Result};
