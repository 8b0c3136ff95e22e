use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} is not symmetric")]
    NotSymmetric(&'static str),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("all particle likelihoods vanished at step {step}")]
    DegenerateLikelihood { step: usize },

    #[error("all responsibilities vanished at step {step}; the iterate lies off every mixture component")]
    DegenerateResponsibilities { step: usize },

    #[error("every restart degenerated at step {step}")]
    AllRestartsDegenerate { step: usize },

    #[error("particle set has conditioning {found}, expected {expected}")]
    WrongConditioning { expected: String, found: String },

    #[error("particle sets disagree in size: {0} vs {1}")]
    ParticleCountMismatch(usize, usize),

    #[error("smoothing denominator for particle {particle} at step {step} is zero (support mismatch)")]
    SupportMismatch { step: usize, particle: usize },

    #[error("smoothing requires n > k + 1, got k = {k}, n = {n}")]
    InvalidSmoothingRange { k: usize, n: usize },

    #[error("model does not support this operation: {0}")]
    UnsupportedModel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
