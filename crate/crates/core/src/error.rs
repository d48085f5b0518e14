use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite or out-of-contract inputs.
    #[error("input error: {0}")]
    Input(String),

    /// An API was called in the wrong order (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),

    /// A loss term or gradient became non-finite.
    #[error("training error: {0}")]
    Training(String),

    /// The replay buffer has nothing to sample from yet.
    #[error("replay buffer not ready: {0}")]
    NotReady(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Input(format!("{what}: component {i} is not finite"))),
        None => Ok(()),
    }
}
