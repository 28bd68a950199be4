//! Crate-wide error type and the exit-code mapping used by the CLI.

use chrono::NaiveDate;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A location-day with too few usable bins for a quadratic fit.
    #[error("underdetermined fit for location {location} on {day}: {usable_bins} usable bins (need >= 3)")]
    UnderdeterminedFit {
        location: u32,
        day: NaiveDate,
        usable_bins: usize,
    },

    #[error("inference failure: {0}")]
    Inference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 config, 3 data, 4 inference.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::UnderdeterminedFit { .. } | Error::Csv(_) => 3,
            Error::Inference(_) => 4,
            Error::Io(_) | Error::Json(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
