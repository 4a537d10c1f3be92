use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// CG lost positive definiteness (or produced a non-finite step).
    #[error("CG breakdown at iteration {iteration}: {reason}")]
    Breakdown { iteration: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite quadratic form for probe {probe}")]
    NonFiniteProbe { probe: usize },

    #[error("right-hand side {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<GpError>,
    },
}

impl GpError {
    /// True for failures of the numerics (as opposed to bad caller input).
    pub fn is_numerical(&self) -> bool {
        match self {
            GpError::InvalidInput(_) | GpError::Unsupported(_) => false,
            GpError::Column { source, .. } => source.is_numerical(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, GpError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(GpError::InvalidInput(msg.into()))
}
