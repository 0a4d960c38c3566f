use thiserror::Error;

use crate::ClientId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {index} = {value:e})")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("arm set is empty")]
    EmptyArmSet,

    #[error("pulled arm is not a member of the arm set for step {step}")]
    ArmNotInSet { step: u64 },

    #[error("unknown client id {0}")]
    UnknownClientId(ClientId),

    #[error("client {0} is already selected")]
    AlreadySelected(ClientId),

    #[error("coverage threshold cannot be met even with every client selected")]
    Infeasible,

    #[error("exhaustive search refused: {0} clients exceeds the enumeration limit")]
    TooManyClients(usize),

    #[error("client {0} was not selected; payments exist only for participants")]
    NotSelected(ClientId),

    #[error(
        "selection rule is not monotone for client {client}: report {excluded} excluded \
         while report {included} was included"
    )]
    NonMonotoneDetected {
        client: ClientId,
        excluded: f64,
        included: f64,
    },

    #[error("strategy produced a non-positive report {0}")]
    NonPositiveReport(f64),

    #[error("invalid configuration field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("cannot read config `{path}`: {reason}")]
    ConfigFile { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
