use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single rejected field, reported back to API and CLI callers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {}", join(.0))]
    Parameter(Vec<Violation>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("non-finite loss at step {step} (lambda_i = {lambda_i}, lambda_s = {lambda_s})")]
    NonFiniteLoss {
        step: usize,
        lambda_i: f32,
        lambda_s: f32,
    },

    #[error("transport error: {message} (the upsampling service may be down; retry later or use the local backend)")]
    Transport { message: String },

    #[error("upsampling job {0} not found")]
    JobNotFound(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parameter(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parameter(vec![Violation::new(field, message)])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
