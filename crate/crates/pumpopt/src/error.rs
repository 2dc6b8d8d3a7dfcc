use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate parametrization: |dx/dt| = {speed:e} at t = {t}")]
    DegenerateWall { t: f64, speed: f64 },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("coincident source and target points")]
    CoincidentPoints,

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("dense factorization failed (condition estimate {condition:e})")]
    Factorization { condition: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
