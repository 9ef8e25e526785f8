//! Probabilistic approximation of the G-expectation PIDE with α-stable jumps.
//!
//! The crate is organised bottom-up:
//!
//! - [`uncertainty`]: the parameter box Θ and the heavy-tailed jump laws `W_k`.
//! - [`quadrature`]: deterministic rules for the Gaussian factor, the jump laws
//!   and the singular α-stable generator integral.
//! - [`step`]: the one-step sublinear expectation (inner expectation, outer sup).
//! - [`generator`]: the nonlinear generator `G` and the consistency residual.
//! - [`scheme`]: the recursive piecewise-constant solver on a 3-D lattice.
//! - [`analysis`]: moments, theoretical exponents, error budgets and order fits.
//! - [`catalog`]: built-in test functions with known derivative bounds.

pub mod analysis;
pub mod catalog;
pub mod generator;
pub mod quadrature;
pub mod scheme;
pub mod step;
pub mod sum;
pub mod uncertainty;

pub use analysis::{AnalysisError, ErrorBudget, MomentSet, RateReport};
pub use generator::GeneratorInput;
pub use quadrature::{QuadratureError, QuadratureRule};
pub use scheme::{Grid, GridFunction, SchemeError, TestFunction};
pub use step::{ParamSearchConfig, StepContext};
pub use uncertainty::{ModelError, StableParams, UncertaintyBox, WkLaw};

/// Crate-wide error, one variant per failing layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
