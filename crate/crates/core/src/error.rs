use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum NicaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix not positive definite ({context}); diagonal range [{min_diag:.3e}, {max_diag:.3e}]")]
    NotPositiveDefinite {
        context: String,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("root finding did not converge: {0}")]
    NoConvergence(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("component {0} has zero variance")]
    ZeroVariance(usize),

    #[error("tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NicaError>;

impl NicaError {
    pub(crate) fn not_pd(context: impl Into<String>, m: &nalgebra::DMatrix<f64>) -> Self {
        let d = m.diagonal();
        NicaError::NotPositiveDefinite {
            context: context.into(),
            min_diag: d.min(),
            max_diag: d.max(),
        }
    }
}
