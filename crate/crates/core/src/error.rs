//! Crate-wide error type.

/// Errors surfaced by any subsystem of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A record in an input file could not be parsed. Carries enough
    /// location detail to find the offending line.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A reference points at an entity that does not exist, or a
    /// structural invariant between artifacts is violated.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// An argument is outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A prompt template was rendered without one of its slots.
    #[error("template `{template}` is missing slot `{slot}`")]
    MissingSlot { template: String, slot: String },

    /// A provider response did not satisfy the expected output schema.
    /// The raw response text is retained so the caller can re-prompt or log.
    #[error("structured output error: {message}")]
    StructuredOutput { message: String, raw: String },

    /// Network / provider-level failure after retries were exhausted.
    #[error("transport error: {0}")]
    Transport(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss; carries a diagnostic dump.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A pipeline stage was invoked before its prerequisites ran.
    #[error("missing prerequisite: run `{required}` before `{stage}`")]
    Prerequisite { stage: String, required: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn structured(message: impl Into<String>, raw: impl Into<String>) -> Self {
        Error::StructuredOutput {
            message: message.into(),
            raw: raw.into(),
        }
    }
}
