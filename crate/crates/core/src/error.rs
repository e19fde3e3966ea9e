use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("labels absent: {0}")]
    LabelsAbsent(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no positive cubes")]
    NoPositiveCubes,
    #[error("backward requires the cached intermediates of a training forward pass")]
    MissingCache,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { step: usize, component: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
