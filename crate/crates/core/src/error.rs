use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A value fell outside the range an operation accepts.
    #[error("{what} = {value} outside [{min}, {max}]")]
    Range {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    /// The caller violated a precondition (wrong shapes, wrong device class, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// The nodal matrix was not positive definite.
    #[error("nodal system is singular at unknown {pivot}")]
    Singular { pivot: usize },

    #[error("calibration failed for pair {pair}: spread {sigma:e} A below {floor:e} A")]
    Calibration { pair: usize, sigma: f64, floor: f64 },

    #[error("matrix is not positive definite: pivot {pivot} = {value:e}")]
    Decomposition { pivot: usize, value: f64 },

    #[error("non-finite drift or diffusion at t = {t}, x = {x:?}")]
    Numerical { t: f64, x: Vec<f64> },

    #[error("degenerate data: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
