use thiserror::Error;

/// Errors raised by the simulation and analysis pipelines.
#[derive(Debug, Error)]
pub enum QkdError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Bloch vector norm {norm} is not 1 (pure state required)")]
    NotPure { norm: f64 },

    #[error("zero intensity Stokes vector")]
    ZeroIntensity,

    #[error("Stokes vector is fully depolarized; no direction to project onto")]
    Unpolarized,

    #[error("no detections in the selected tally cells")]
    NoCounts,

    #[error("states do not span the Z-X plane")]
    SingularStates,

    #[error("rank-deficient QWP angle set: {0}")]
    RankDeficient(String),

    #[error("missing pair: {0}")]
    MissingPair(String),

    #[error("tally invariant violated: {0}")]
    TallyInvariant(String),

    #[error("all CW visibilities are zero")]
    ZeroVisibility,

    #[error("empty feasible region: {0}")]
    EmptyFeasibleRegion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = QkdError> = std::result::Result<T, E>;
