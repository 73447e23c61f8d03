//! Federated cross-domain sequential recommendation with disentangled
//! domain-shared and domain-exclusive sequence representations.
//!
//! Every domain is a client holding two encoder branches. The shared branch
//! is averaged across clients by a server; the exclusive branch stays local.
//! Training combines a variational bound that keeps the two branches apart,
//! a mutual information bound pulling the shared branch towards the
//! server's global user representations, and a contrastive objective on the
//! exclusive branch.

pub mod autograd;
pub mod cim;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod gradcheck;
pub mod params;
pub mod seed;
pub mod srd;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Crate version, recorded in experiment artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
