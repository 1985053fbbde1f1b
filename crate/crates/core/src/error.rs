use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("total forward area {0:e} is below 1e-12; the law is singular there")]
    SingularArea(f64),

    #[error("data error: {0}")]
    Data(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("unsupported {format} version {found} (this build reads version {expected})")]
    Version {
        format: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (divergent fits, non-finite objectives)
    /// as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::SingularArea(_))
    }
}
