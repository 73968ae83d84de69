use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("group `{0}` has no units")]
    EmptyGroup(String),

    #[error("invalid auxiliary design: {0}")]
    InvalidAuxiliary(String),

    #[error("probability {0} is outside the open interval (0, 1)")]
    InvalidProbability(f64),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("design deficient: {0}")]
    DesignDeficient(String),

    #[error("no selected groups: every first-stage estimate is undefined")]
    NoData,

    #[error("degenerate scenario: {0}")]
    DegenerateScenario(String),

    #[error("unsupported scenario: {0}")]
    UnsupportedScenario(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// True for failures caused by a rank-deficient or otherwise unsolvable
    /// design rather than by malformed input.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::DesignDeficient(_) | Error::NoData | Error::DegenerateScenario(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
