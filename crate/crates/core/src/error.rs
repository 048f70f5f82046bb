//! Error taxonomy shared by the library and the command-line tool.
//!
//! Every failure is sorted into one of four coarse categories so that the
//! command-line tool can map it onto its exit-code contract:
//!
//! | category            | exit code | meaning                                        |
//! |---------------------|-----------|------------------------------------------------|
//! | invalid input       | 2         | unparseable or dimensionally inconsistent data |
//! | hypothesis failure  | 3         | a required structural hypothesis does not hold |
//! | numerical failure   | 4         | a search or consistency check broke down       |
//! | negative outcome    | 1         | the requested check ran and reported "no"      |
//!
//! The "negative outcome" code is produced by the tool itself (a condition
//! report with a failing row is not an error), so the variants here only
//! cover the other three categories.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (JSON syntax, dimension
    /// mismatches, out-of-range configuration values).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The model is not in the class an operation requires (e.g. a
    /// canonicalization request for non-proportional volatility factors).
    #[error("class mismatch: {0}")]
    ClassMismatch(String),

    /// A structural hypothesis of a construction fails (sign conditions,
    /// eliminated intercepts, excluded initial data).
    #[error("hypothesis failure: {0}")]
    Hypothesis(String),

    /// A numerical search exhausted its budget without an answer.
    #[error("search failure: {0}")]
    SearchFailure(String),

    /// Two independent evaluation routes disagreed beyond tolerance, or a
    /// computed quantity lost finiteness.
    #[error("internal consistency failure: {0}")]
    InternalConsistency(String),

    /// A run exceeded a hard safety cap (iteration limits, overflow budget).
    #[error("safety cap exceeded: {0}")]
    SafetyCap(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the command-line tool uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::ClassMismatch(_) | Error::Hypothesis(_) => 3,
            Error::SearchFailure(_) | Error::InternalConsistency(_) | Error::SafetyCap(_) => 4,
        }
    }
}
