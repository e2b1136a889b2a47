use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("perfect separation detected: {0}")]
    Separation(String),

    #[error("plant {plant_id}, year {year}: {source}")]
    AtRow {
        plant_id: u64,
        year: i32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn at_row(self, plant_id: u64, year: i32) -> Self {
        Error::AtRow {
            plant_id,
            year,
            source: Box::new(self),
        }
    }

    /// True when the failure is numerical in nature (non-convergence,
    /// separation, singular systems) rather than bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical(_) | Error::Separation(_) => true,
            Error::AtRow { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
