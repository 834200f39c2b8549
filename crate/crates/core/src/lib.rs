//! Point-cloud networks that encode scalar neighbor features as rotated
//! vectors, with hand-written reverse-mode gradients, synthetic data and a
//! small deterministic training loop.

pub mod dataio;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nnops;
pub mod oracle;
pub mod setabs;
pub mod train;
pub mod vecenc;

pub use error::{Error, Result};
