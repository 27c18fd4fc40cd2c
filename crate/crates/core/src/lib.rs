//! Natural pre-images of image representations.
//!
//! Reconstructs images whose features under a network match a target
//! (inversion), maximize a unit (activation maximization) or exaggerate the
//! features of a reference image (caricatures), by minimizing a regularized
//! energy over pixels.

pub mod energy;
pub mod error;
pub mod hogsift;
pub mod layers;
pub mod metrics;
pub mod netio;
pub mod network;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use network::Network;
pub use tensor::{RandomSource, Tensor};
