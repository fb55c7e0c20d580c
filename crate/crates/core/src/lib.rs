//! Nested partially-latent class models with covariates for case-control
//! etiology studies.
//!
//! The crate covers the data model, spline designs, likelihood kernels,
//! priors, a multi-chain Metropolis-within-Gibbs sampler, convergence
//! diagnostics, simulation scenarios and posterior summaries.

pub mod data;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod mcmc;
pub mod model;
pub mod num;
pub mod priors;
pub mod simulate;
pub mod special;
pub mod splines;
pub mod summaries;

pub use data::{CauseSpec, Dataset, ModelSpec, PriorConfig, Term};
pub use error::{Error, Result};
pub use mcmc::{fit, ChainConfig, DrawsStore, Fit, FitManifest};

/// Double-precision parameters, the scalar used by the sampler.
pub type Params64 = model::Params<f64>;
/// Single-precision parameters for evaluating the kernels at reduced precision.
pub type Params32 = model::Params<f32>;
pub type PreparedData64 = design::PreparedData<f64>;
pub type PreparedData32 = design::PreparedData<f32>;
