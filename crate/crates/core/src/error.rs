use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("covariate column `{0}` has zero sample variance")]
    ZeroVarianceColumn(String),
    #[error("n * p = {0} is not an integer between 1 and n - 1")]
    NonIntegerGroupSize(f64),
    #[error("covariance matrix is singular (smallest eigenvalue {min:e}, largest {max:e})")]
    SingularSigma { min: f64, max: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("assignment has {got} treated units, design expects {expected}")]
    GroupCountMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k = {k} exceeds the rank {rank} of the covariance matrix")]
    RankTooLarge { k: usize, rank: usize },
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{draws} draws is too few for alpha = {alpha} (need at least {min})")]
    TooFewDraws { draws: usize, alpha: f64, min: usize },
    #[error("all eigenvalues of the criterion are zero")]
    DegenerateSpectrum,
    #[error("criterion spectrum is not constant, exact chi-square calibration does not apply")]
    NotChiSquareCase,
    #[error("invalid group sizes: n = {n}, n1 = {n1}")]
    BadCounts { n: usize, n1: usize },
    #[error("no acceptable assignment within {0} draws")]
    MaxDrawsExceeded(u64),
    #[error("only {accepted} accepted draws, need at least {required}")]
    TooFewAccepted { accepted: usize, required: usize },
    #[error("approximation needs every criterion eigenvalue positive, eta[{0}] is zero")]
    ZeroEta(usize),
    #[error("criterion is not PCA-restricted")]
    NotPcaCriterion,
    #[error("outcome model has no coefficient vector")]
    MissingOutcomeModel,
    #[error("coefficient vector must be finite and nonzero")]
    ZeroBeta,
    #[error("variance factors do not belong to this criterion")]
    NuCriterionMismatch,
    #[error("variance factor estimation failed: {0}")]
    NuEstimationFailed(String),
    #[error("confidence bound not bracketed within {0} grid steps")]
    BracketNotFound(usize),
    #[error("outcomes have zero variance in both arms")]
    DegenerateOutcomes,
    #[error("duplicate unit id `{0}`")]
    DuplicateUnitId(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroVarianceColumn(_) => "ZeroVarianceColumn",
            Error::NonIntegerGroupSize(_) => "NonIntegerGroupSize",
            Error::SingularSigma { .. } => "SingularSigma",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::GroupCountMismatch { .. } => "GroupCountMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::RankTooLarge { .. } => "RankTooLarge",
            Error::NotPsd(_) => "NotPSD",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::TooFewDraws { .. } => "TooFewDraws",
            Error::DegenerateSpectrum => "DegenerateSpectrum",
            Error::NotChiSquareCase => "NotChiSquareCase",
            Error::BadCounts { .. } => "BadCounts",
            Error::MaxDrawsExceeded(_) => "MaxDrawsExceeded",
            Error::TooFewAccepted { .. } => "TooFewAccepted",
            Error::ZeroEta(_) => "ZeroEta",
            Error::NotPcaCriterion => "NotPCACriterion",
            Error::MissingOutcomeModel => "MissingOutcomeModel",
            Error::ZeroBeta => "ZeroBeta",
            Error::NuCriterionMismatch => "NuCriterionMismatch",
            Error::NuEstimationFailed(_) => "NuEstimationFailed",
            Error::BracketNotFound(_) => "BracketNotFound",
            Error::DegenerateOutcomes => "DegenerateOutcomes",
            Error::DuplicateUnitId(_) => "DuplicateUnitId",
            Error::NonFinite { .. } => "NonFinite",
            Error::Parse(_) => "ParseError",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::FileNotFound(_) => "FileNotFound",
            Error::Io(_) => "Io",
            Error::Csv(_) => "ParseError",
            Error::Json(_) => "ParseError",
        }
    }

    /// True for failures of a numerical procedure on otherwise valid input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SingularSigma { .. }
                | Error::DegenerateSpectrum
                | Error::MaxDrawsExceeded(_)
                | Error::TooFewAccepted { .. }
                | Error::NuEstimationFailed(_)
                | Error::BracketNotFound(_)
                | Error::DegenerateOutcomes
        )
    }
}
