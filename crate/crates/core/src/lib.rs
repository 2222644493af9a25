//! Population mixed-effects modelling with exact-inference individual
//! samplers.
//!
//! The crate fits nonlinear mixed-effects models by stochastic approximation
//! EM and exposes the individual-level Markov kernels directly: a prior
//! independence sampler, adaptive random walks, a Langevin kernel, and an
//! independence sampler whose proposal is rebuilt from the individual MAP and
//! the local curvature or linearization of the structural model.

pub mod config;
pub mod diagnostics;
pub mod dual;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod map_laplace;
pub mod model;
pub mod models;
pub mod quad;
pub mod rng;
pub mod saem;
pub mod samplers;
pub mod transform;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use likelihood::{
    cont_loglik, grad_joint, hess_joint, joint_logpdf, tte_loglik, ErrorModel, LogDensityEval,
    ObservationModel, Posterior,
};
pub use map_laplace::{
    compute_map, exact_linear_conditional, laplace_proposal, linearized_proposal,
    GaussianProposal, MapResult, ProposalFamily,
};
pub use model::{IndividualData, Observations, PopulationModel, PriorFamily, Theta};
pub use transform::Transform;
