use thiserror::Error;

use crate::graph::VariableId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle is at pi, the logarithm is not unique")]
    AngleAtPi,

    #[error("edge {edge} ({from} -> {to}): rotation error angle is at pi")]
    EdgeAngleAtPi {
        edge: usize,
        from: VariableId,
        to: VariableId,
    },

    #[error("matrix is numerically rank deficient")]
    RankDeficient,

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("system matrix is not positive definite (block column {column})")]
    NotPositiveDefinite { column: usize },

    #[error("connected component containing variable {0} has no fixed variable")]
    NoAnchor(VariableId),

    #[error("linear system is singular beyond the gauge freedom")]
    SingularSystem,

    #[error("empty input")]
    EmptyInput,

    #[error("variable id sets differ between the two graphs")]
    IdMismatch,

    #[error("unknown variable {0}")]
    UnknownVariable(VariableId),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
