use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("value {value} outside range [{lower}, {upper}]")]
    Range { value: f64, lower: f64, upper: f64 },

    #[error("time index {t} out of range 0..={max}")]
    TimeIndex { t: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("formula error: {0}")]
    Formula(String),

    #[error("regime `{regime}` unsupported at node {node}: no followers")]
    UnsupportedRegime { regime: String, node: usize },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Validation(_) | Error::Range { .. } | Error::Csv(_)
        )
    }
}
