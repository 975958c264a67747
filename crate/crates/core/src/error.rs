use std::fmt;

use serde::{Deserialize, Serialize};

/// Which diagonal block of a partitioned covariance an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    A,
    B,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::A => f.write_str("A"),
            Block::B => f.write_str("B"),
        }
    }
}

/// Why a bound cannot be evaluated for a given law and partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    HeterogeneousVariances,
    PerfectCrossCorrelation,
    NoAdmissibleDelta,
    ConditionFails,
    SingularBlock,
    ZeroResidualVariance,
    SingularCovariance,
    BadGeometry,
    NotRequested,
}

impl Reason {
    pub fn code(self) -> &'static str {
        match self {
            Reason::HeterogeneousVariances => "heterogeneous_variances",
            Reason::PerfectCrossCorrelation => "perfect_cross_correlation",
            Reason::NoAdmissibleDelta => "no_admissible_delta",
            Reason::ConditionFails => "condition_fails",
            Reason::SingularBlock => "singular_block",
            Reason::ZeroResidualVariance => "zero_residual_variance",
            Reason::SingularCovariance => "singular_covariance",
            Reason::BadGeometry => "bad_geometry",
            Reason::NotRequested => "not_requested",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("coordinate {0} has non-positive variance")]
    ZeroVariance(usize),
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid partition: {0}")]
    BadPartition(String),
    #[error("covariance block {0} is numerically singular")]
    SingularBlock(Block),
    #[error("sample is empty")]
    EmptySample,
    #[error("sample has zero spread")]
    DegenerateSample,
    #[error("subset is empty")]
    EmptySubset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bound not applicable ({reason}): {detail}")]
    Inapplicable { reason: Reason, detail: String },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn inapplicable(reason: Reason, detail: impl Into<String>) -> Self {
        Error::Inapplicable {
            reason,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
