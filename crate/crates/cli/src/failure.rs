//! Error categories, their `ERROR:<category>:` prefix and exit codes.

use std::fmt;

use bapgan_core::Error;
use bapgan_vtt::VttError;

#[derive(Debug)]
pub struct Failure {
    pub category: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    /// 1 usage, 2 data, 3 runtime or numeric.
    pub fn exit_code(&self) -> u8 {
        match self.category {
            "usage" | "config" | "range" => 1,
            "ingestion" | "io" | "config-file" | "checkpoint" | "weights" | "not-found" | "shortfall" => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ERROR:{}: {}", self.category, self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::Config(_) => "config",
            Error::Range(_) => "range",
            Error::Ingestion { .. } => "ingestion",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingWeights(_) => "weights",
            Error::NonFinite { .. } => "numeric",
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
        };
        Failure::new(category, e.to_string())
    }
}

impl From<VttError> for Failure {
    fn from(e: VttError) -> Self {
        match e {
            VttError::Model(inner) => inner.into(),
            VttError::NotFound(_) => Failure::new("not-found", e.to_string()),
            VttError::Shortfall(_) => Failure::new("shortfall", e.to_string()),
            VttError::BadRequest(_) => Failure::new("usage", e.to_string()),
            VttError::Storage { .. } => Failure::new("io", e.to_string()),
            _ => Failure::new("service", e.to_string()),
        }
    }
}
