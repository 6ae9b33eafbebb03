//! Diffusion posterior sampling for single- and multi-image super-resolution
//! of anisotropic volumes.
//!
//! The likelihood of independent measurements `y_i = A_i x + e_i` is a sum
//! over measurements, so its gradient through the denoiser `mu0(x_t)` is the
//! sum of per-measurement gradients. Every solver here is written against
//! that decomposition and never materializes the stacked operator.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod error;
pub mod metrics;
pub mod operators;
pub mod phantoms;
pub mod priors;
pub mod rng;
pub mod samplers;
pub mod volume;

pub use error::{Error, Result};
pub use operators::{simulate_measurement, Measurement, SliceProfileOperator, StackedOperator};
pub use priors::{FlowSchedule, GaussianPrior, MixtureComponent, MixturePrior, Prior, RectifiedFlow};
pub use rng::SeededRng;
pub use samplers::{SolverConfig, SolverKind};
pub use volume::{axpy, dot, sample_standard_normal, Axis, Dims, LinearOperator, Spacing, Volume};
