//! Dense numerical kernels: stable softmax, cross-entropy, softplus, Adam,
//! a pinned PRNG, and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod rng;

pub use adam::AdamState;
pub use gradcheck::check_gradient;
pub use ops::{clamped_log, cross_entropy, inv_softplus, log_softmax, softmax, softplus, softplus_grad};
pub use rng::Rng;
