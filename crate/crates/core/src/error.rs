//! Crate-wide error type with machine-readable codes and CLI exit classes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains no rows")]
    EmptyInput,
    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cluster {0:?} has no treated or no control unit")]
    OneArmCluster(String),
    #[error("non-positive weight {value} for unit {index}")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("probability {value} out of range for {what}")]
    InvalidProbability { what: String, value: f64 },
    #[error("parse error at row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("propensity {0} outside (0,1)")]
    ProbabilityOutOfRange(f64),
    #[error("complete or quasi-complete separation detected (|coefficient| > {cap})")]
    SeparationDetected { cap: f64 },
    #[error("singular information matrix in weighted least squares step")]
    SingularInformation,
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        what: String,
        iterations: usize,
        residual: f64,
    },
    #[error("collinear covariates: calibration Jacobian is singular along {direction}")]
    CollinearCovariates { direction: String },
    #[error("singular moment matrix in variance linearization")]
    SingularMoment,
    #[error("covariate {0:?} is constant in the whole population")]
    ZeroVariance(String),
    #[error("missing design information: {0}")]
    MissingDesignInfo(String),
    #[error("bootstrap replicate degenerate after {retries} redraws")]
    ResampleDegenerate { retries: usize },
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable module-qualified code for machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput => "data.empty_input",
            Error::DimensionMismatch { .. } => "data.dimension_mismatch",
            Error::OneArmCluster(_) => "data.one_arm_cluster",
            Error::NonPositiveWeight { .. } => "data.non_positive_weight",
            Error::InvalidProbability { .. } => "data.invalid_probability",
            Error::ParseError { .. } => "data.parse_error",
            Error::MissingColumn(_) => "data.missing_column",
            Error::ProbabilityOutOfRange(_) => "data.probability_out_of_range",
            Error::SeparationDetected { .. } => "model.separation_detected",
            Error::SingularInformation => "model.singular_information",
            Error::NotConverged { .. } => "numeric.not_converged",
            Error::CollinearCovariates { .. } => "calibration.collinear_covariates",
            Error::SingularMoment => "variance.singular_moment",
            Error::ZeroVariance(_) => "diagnostics.zero_variance",
            Error::MissingDesignInfo(_) => "variance.missing_design_info",
            Error::ResampleDegenerate { .. } => "bootstrap.resample_degenerate",
            Error::UnknownScenario(_) => "config.unknown_scenario",
            Error::Config(_) => "config.invalid",
            Error::Io(_) => "io.error",
        }
    }

    /// CLI exit status class: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownScenario(_) => 2,
            Error::EmptyInput
            | Error::DimensionMismatch { .. }
            | Error::OneArmCluster(_)
            | Error::NonPositiveWeight { .. }
            | Error::InvalidProbability { .. }
            | Error::ParseError { .. }
            | Error::MissingColumn(_)
            | Error::Io(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
