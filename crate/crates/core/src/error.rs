use thiserror::Error;

pub type Result<T> = std::result::Result<T, ApcError>;

#[derive(Debug, Error)]
pub enum ApcError {
    #[error("dimension too small: {what} = {value}, need at least {min}")]
    DimensionTooSmall {
        what: &'static str,
        value: usize,
        min: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular system (condition estimate {condition:.3e})")]
    SingularSystem { condition: f64 },

    #[error("transform is singular or blocks are not as expected: {0}")]
    SingularTransform(String),

    #[error("fixed-effect design is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficientFixed { rank: usize, cols: usize },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("sweep failed at a={a}, p={p}, lambda={lambda}: {source}")]
    SweepFailed {
        a: usize,
        p: usize,
        lambda: f64,
        #[source]
        source: Box<ApcError>,
    },
}
