use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("assortments are identical; distance is zero")]
    ZeroDistance,

    #[error("candidate assortment is not a member of the training family")]
    NotInFamily,

    #[error("design matrix is rank deficient; collinear columns {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Parses JSON, naming the offending field when a value has the wrong shape.
pub(crate) fn from_json<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(s);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Json(e.into_inner())
        } else {
            Error::InvalidParameter(format!("{path}: {}", e.into_inner()))
        }
    })?;
    de.end()?;
    Ok(value)
}
