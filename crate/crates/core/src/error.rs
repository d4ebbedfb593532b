use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("extreme logit {eta} (|eta| > {limit}): Fisher information underflows")]
    ExtremeLogit { eta: f64, limit: f64 },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid sampling model: {0}")]
    Sampling(String),

    #[error("overlap violation: {0}")]
    Overlap(String),

    #[error("score matrix invariant violated: {0}")]
    Invariant(String),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("logistic solve did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    Convergence { iterations: usize, grad_norm: f64 },

    #[error("ill-conditioned information operator: relative residual {residual:.3e}, smallest retained eigenvalue {min_eigenvalue:.3e}")]
    IllConditioned { residual: f64, min_eigenvalue: f64 },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("battle {index}: {source}")]
    AtBattle {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("diagnostic refused: {0}")]
    TooLarge(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
