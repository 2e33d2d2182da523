use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("spec has {count} violation(s); first: {first}")]
    InvalidSpec { count: usize, first: String },

    #[error("episode length {requested} exceeds horizon + lookahead = {max}")]
    EpisodeTooLong { requested: usize, max: usize },

    #[error("mixture weights sum to {sum}, expected 1 within 1e-12")]
    MixtureNotNormalized { sum: f64 },

    #[error("data policies must be latent-tabular (noise-free); component {index} reads observations")]
    NoisyDataPolicy { index: usize },

    #[error("lookahead {requested} exceeds the stored lookahead {available}")]
    LookaheadExceeded { requested: usize, available: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{what} needs {size:.3e} entries, above the limit of {limit:.3e}")]
    TooLarge { what: &'static str, size: f64, limit: f64 },

    #[error("exact evaluation needs a factor-projection decoder")]
    NotProjection,

    #[error("ACRO needs action-labelled trajectories; got video only")]
    MissingActions,

    #[error("reward state {state} is not reachable within the horizon")]
    UnreachableReward { state: usize },

    #[error("unknown suite `{name}`; valid suites: {valid}")]
    UnknownSuite { name: String, valid: String },

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
