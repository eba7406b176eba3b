//! Extended variational inference for Bayesian beta and Dirichlet mixture
//! models.
//!
//! The likelihood of a beta or Dirichlet component contains the
//! log-inverse-beta term `ln Γ(Σu) − Σ ln Γ(u_k)`, whose expectation under
//! the variational posterior is intractable. Inference here replaces it by
//! an analytic lower bound, either one shared weak-condition bound
//! ([`BoundKind::SlbWeak`]) or separate strong-condition bounds per variable
//! group ([`BoundKind::MlbStrong`]), and runs coordinate ascent on the
//! resulting surrogate objective.
//!
//! Modules, bottom-up:
//!
//! * [`special`]: `ln Γ`, `ψ`, `ψ'` and seeded random streams.
//! * [`distributions`]: densities, samplers and KL divergences.
//! * [`mixtures`]: mixture specifications and synthetic datasets.
//! * [`bounds`]: the LIB term, its surrogates and their gaps.
//! * [`inference`]: the coordinate-ascent engine.
//! * [`evaluation`]: Monte Carlo ELBO and KL, SLB-vs-MLB comparisons.
//! * [`harness`]: experiment configs, presets and file output.

pub mod bounds;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod inference;
pub mod mixtures;
pub mod special;

pub use bounds::{BoundKind, ComponentExpectations, GapEstimate, MlbCoupling, Surrogate};
pub use distributions::{DirichletWeights, GammaPosterior};
pub use error::{Error, Result};
pub use inference::{Priors, RunConfig, TraceRecord, VariationalState};
pub use mixtures::{Dataset, MixtureSpec};
pub use special::RngStream;
