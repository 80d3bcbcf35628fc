//! Dialect-component inference for categorical sound-change data.
//!
//! A truncated stick-breaking hierarchical Dirichlet process explains each
//! observed reflex as drawn from one of up to `T` latent components; each
//! language mixes the components in its own proportions. The model is fit by
//! mean-field Gaussian stochastic variational inference over an unconstrained
//! reparameterization, runs are aligned against label switching, and the
//! consensus estimate feeds per-token, per-type and per-language posteriors.

pub mod align;
pub mod analytics;
pub mod corpus;
pub mod error;
pub mod genmodel;
pub mod io;
pub mod math;
pub mod oracle;
pub mod pipeline;
pub mod seeding;
pub mod transforms;
pub mod vinfer;

pub use error::{DataError, ModelError};
