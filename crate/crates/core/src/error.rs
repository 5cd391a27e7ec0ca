use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),

    #[error("non-finite value in trajectory {trajectory} at t={t}: {what}")]
    NonFinite {
        trajectory: usize,
        t: usize,
        what: &'static str,
    },

    #[error("singular normal equations ({context}); use a ridge penalty > 0")]
    Singular { context: String },

    #[error("no analytic oracle for this configuration: {0}")]
    NoAnalyticOracle(String),

    #[error("horizon mismatch: data has H={data}, nuisances have H={nuisance}")]
    HorizonMismatch { data: usize, nuisance: usize },

    #[error("nuisance mode mismatch: variant {variant} requires {required} nuisances")]
    ModeMismatch {
        variant: String,
        required: &'static str,
    },

    #[error("{variant} needs {what} nuisances, which were not provided")]
    MissingNuisance {
        variant: String,
        what: &'static str,
    },

    #[error("cross-fitting violated: fold {fold} nuisances were trained on trajectory {trajectory}")]
    CrossFitViolation { fold: usize, trajectory: usize },

    #[error("zero residual variance in behavior fit")]
    DegenerateBehavior,

    #[error("non-finite gradient at iterate {iter}")]
    NonFiniteGradient { iter: usize },

    #[error("bootstrap failed: only {succeeded} of {attempted} replicates succeeded")]
    BootstrapFailure { succeeded: usize, attempted: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
