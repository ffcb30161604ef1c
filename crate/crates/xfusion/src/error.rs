//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by corpus, encoder, diffusion, training and evaluation code.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field is missing, out of range, or inconsistent.
    /// `field` names the offending key so CLI diagnostics can point at it.
    #[error("config: field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A corpus record or on-disk artifact is missing or malformed.
    #[error("data: {message}")]
    Data { message: String },

    /// A manifest record violates the corpus schema.
    #[error("schema violation in record `{id}`: field `{field}`: {message}")]
    Schema {
        id: String,
        field: String,
        message: String,
    },

    /// Tensor arguments with incompatible shapes.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// An operation received an invalid argument (bad timestep, empty input, ...).
    #[error("{0}")]
    Invalid(String),

    /// Training loss became non-finite.
    #[error("training diverged at step {step} (learning rate {learning_rate}): loss = {loss}")]
    Diverged {
        step: usize,
        learning_rate: f64,
        loss: f64,
    },

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {path}: {message}")]
    Image { path: String, message: String },

    #[error("json: {context}: {message}")]
    Json { context: String, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Error::Data {
            message: message.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
