use thiserror::Error;

/// Errors raised by the estimation, selection and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PgmmError {
    /// A precondition on shapes or argument ranges was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A linear-algebra or density evaluation produced a non-finite value.
    #[error("numerical failure{}{}: {reason}",
        component.map(|g| format!(" in component {g}")).unwrap_or_default(),
        row.map(|i| format!(" at row {i}")).unwrap_or_default())]
    Numerical {
        component: Option<usize>,
        row: Option<usize>,
        reason: String,
    },

    /// A component carries less than one observation's worth of responsibility.
    #[error("component {component} is empty (total responsibility {mass:.3e})")]
    EmptyComponent { component: usize, mass: f64 },

    #[error("initialization failed after {attempts} attempts: {reason}")]
    Initialization { attempts: usize, reason: String },

    /// Every start of a fit failed.
    #[error("all {starts} starts failed; first failure: {first}")]
    FitFailure {
        starts: usize,
        first: String,
        failures: Vec<String>,
    },

    #[error("every cell of the search grid failed ({cells} cells); first failure: {}",
        reasons.first().map(String::as_str).unwrap_or("none"))]
    SearchFailure { cells: usize, reasons: Vec<String> },
}

impl PgmmError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        PgmmError::Contract(msg.into())
    }

    pub(crate) fn numerical(component: Option<usize>, reason: impl Into<String>) -> Self {
        PgmmError::Numerical {
            component,
            row: None,
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numerics of a particular start rather than
    /// by bad arguments.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, PgmmError::Contract(_))
    }
}

pub type Result<T> = std::result::Result<T, PgmmError>;
