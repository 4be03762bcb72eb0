use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("invalid latent spec: {0}")]
    InvalidLatentSpec(String),

    #[error("covariance draw is not positive definite even after jitter (seed {seed})")]
    DegenerateCovariance { seed: u64 },

    #[error("could not draw a layer with condition number <= {cond_max} after {attempts} attempts (dim {dim})")]
    IllConditionedMixing {
        dim: usize,
        cond_max: f64,
        attempts: usize,
    },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("content is defined for two or more views, got a subset of size {0}")]
    SubsetTooSmall(usize),

    #[error("view {view} is not a member of subset {subset:?}")]
    ViewNotInSubset { view: usize, subset: Vec<usize> },

    #[error("index sets overlap: {0:?}")]
    OverlappingSets(Vec<usize>),

    #[error("selector count mismatch within subset {subset:?}: counts {counts:?}")]
    SelectorCountMismatch {
        subset: Vec<usize>,
        counts: Vec<usize>,
    },

    #[error("operation requires a relaxed selector")]
    NotRelaxed,

    #[error("stale tape: forward pass saw batch {tape}, gradient has {grad} rows")]
    StaleTape { tape: usize, grad: usize },

    #[error("batch too small: need at least {min} rows, got {actual}")]
    BatchTooSmall { min: usize, actual: usize },

    #[error("values outside [0, 1] passed to uniformity test")]
    OutOfUnitInterval,

    #[error("latent dimension {0} exceeds the algebra engine limit of 16")]
    TooManyLatents(usize),

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("training loss did not decrease for seeds {0:?}")]
    LossNotDecreasing(Vec<u64>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
