//! Nested Laplace approximation for restoring Poisson-corrupted images.
//!
//! The latent image is a proper ICAR Gaussian Markov random field on the
//! pixel lattice, observed through an identity-link Poisson model. Posterior
//! pixel marginals are mixtures of per-hyperparameter Gaussian
//! approximations, integrated over a grid or central composite design in a
//! standardized hyperparameter space.

pub mod cli;
pub mod error;
pub mod gmrf;
pub mod imaging;
pub mod inla;
pub mod laplace;
pub mod likelihood;
pub mod mcmc;
pub mod metrics;
pub mod sparse;

pub use error::{Error, ErrorKind, Result};
