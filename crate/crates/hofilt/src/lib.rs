//! High-order time discretizations of the nonlinear-filtering likelihood
//! functional, with Monte Carlo estimators of the conditional distributions
//! and a convergence-order benchmark harness.
//!
//! The pipeline: a partially observed diffusion is specified symbolically
//! ([`model`]), its sensor coefficients are expanded through the operator
//! calculus into per-multi-index tables ([`multiindex`], [`model`]), paths
//! are simulated on a fine grid with reproducible driver substreams
//! ([`simulate`]), the likelihood functional and its order-m discretizations
//! are evaluated per partition interval ([`likelihood`]), ensembles estimate
//! the conditional distributions and their discretization error ([`filter`]),
//! and the benchmark harness fits the observed convergence order ([`bench`]).

pub mod bench;
pub mod expr;
pub mod filter;
pub mod likelihood;
pub mod model;
pub mod multiindex;
pub mod partition;
pub mod simulate;
#[doc(hidden)]
pub mod testutil;
