//! Model-based clustering with parsimonious mixtures of factor analyzers.
//!
//! Means are estimated under an adaptive-LASSO penalty by a two-stage
//! alternating ECM algorithm, and models are compared with BIC, AIC, CAIC and
//! the penalized criteria LPBIC and ALPBIC.

pub mod aecm;
pub mod covariance;
pub mod criteria;
pub mod data;
pub mod error;
pub mod metrics;
pub mod mixture;
pub mod penalty;
pub mod search;
pub mod simgen;
pub mod structure;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use aecm::{FitConfig, FitResult, InitStrategy};
pub use criteria::{Criterion, CriterionReport, SignTerm};
pub use data::DataMatrix;
pub use error::{PgmmError, Result};
pub use mixture::{MixtureParams, Responsibilities};
pub use penalty::{PenaltyControls, PenaltySpec};
pub use structure::CovarianceStructure;
