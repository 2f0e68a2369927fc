use std::path::PathBuf;

/// Errors produced anywhere in the inference pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("coordinate {coordinate} = {value} is outside the digital range [0, {max}]")]
    Domain {
        coordinate: usize,
        value: f64,
        max: f64,
    },
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid stimulus protocol: {0}")]
    InvalidProtocol(String),
    #[error("non-finite membrane state at integration step {step}")]
    NumericalInstability { step: usize },
    #[error("protocol does not match traces: {0}")]
    ProtocolMismatch(String),
    #[error("exponential fit needs positive heights, got {value} at index {index}")]
    FitDomain { index: usize, value: f64 },
    #[error("exponential fit did not converge (residual {residual:e})")]
    FitFailure { residual: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },
    #[error("dataset has {got} samples, training needs at least {min}")]
    DatasetTooSmall { min: usize, got: usize },
    #[error("atom set contains duplicated parameters (duplicated training inputs?)")]
    DuplicateAtoms,
    #[error("target is unstable: {failures} of {trials} trials failed observable extraction")]
    TargetUnstable { failures: usize, trials: usize },
    #[error("{discarded} of {attempted} simulations were discarded, above the 20% limit")]
    DiscardRateExceeded { discarded: usize, attempted: usize },
    #[error("posterior leakage: acceptance rate {rate:.4} below 1%")]
    Leakage { rate: f64 },
    #[error("density estimator is not amortized; it can only be conditioned on its target")]
    NotAmortized,
    #[error("ensemble members disagree: {0}")]
    EnsembleConfig(String),
    #[error("reference likelihood vanished on the whole grid")]
    VanishingLikelihood,
    #[error("malformed flow file: {0}")]
    FlowFormat(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used for the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::Shape { .. } => "shape",
            Error::InvalidParameters(_) => "invalid_parameters",
            Error::InvalidProtocol(_) => "invalid_protocol",
            Error::NumericalInstability { .. } => "numerical_instability",
            Error::ProtocolMismatch(_) => "protocol_mismatch",
            Error::FitDomain { .. } => "fit_domain",
            Error::FitFailure { .. } => "fit_failure",
            Error::Config(_) => "config",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::DatasetTooSmall { .. } => "dataset_too_small",
            Error::DuplicateAtoms => "duplicate_atoms",
            Error::TargetUnstable { .. } => "target_unstable",
            Error::DiscardRateExceeded { .. } => "discard_rate_exceeded",
            Error::Leakage { .. } => "leakage",
            Error::NotAmortized => "not_amortized",
            Error::EnsembleConfig(_) => "ensemble_config",
            Error::VanishingLikelihood => "vanishing_likelihood",
            Error::FlowFormat(_) => "flow_format",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
