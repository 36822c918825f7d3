//! Visual Turing Test service. Raters see one image per trial and answer
//! real or synthetic; ground truth stays on the server, every trial and
//! response is appended to a per-session JSON-lines log, and reports are
//! replayed from that log with exact rational arithmetic.

pub mod planner;
pub mod scoring;
pub mod server;
pub mod store;

use serde::{Deserialize, Serialize};

pub use planner::{plan_trials, DiskSource, HeldOutImage, ModelSynthesizer, PlannedTrial, TrialSource, Synthesizer};
pub use scoring::{age_shift_columns, score, Answer, Column, SessionScore, Tally, Truth};
pub use server::{router, serve, AppState};
pub use store::{Ack, SessionStore, SessionSummary, StoredTrial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Realism,
    Progression,
    Regression,
}

impl SessionKind {
    /// `(n_real, n_synthetic)` per trial kind.
    pub fn default_counts(self) -> (usize, usize) {
        match self {
            SessionKind::Realism => (50, 50),
            SessionKind::Progression | SessionKind::Regression => (25, 25),
        }
    }

    /// Bin shift of the synthetic images (8 years at 4-year bins).
    pub fn bin_shift(self) -> i64 {
        match self {
            SessionKind::Realism => 0,
            SessionKind::Progression => 2,
            SessionKind::Regression => -2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionKind::Realism => "realism",
            SessionKind::Progression => "progression",
            SessionKind::Regression => "regression",
        }
    }

    /// Answer word for the synthetic class.
    pub fn synthetic_word(self) -> &'static str {
        match self {
            SessionKind::Realism => "synthetic",
            SessionKind::Progression => "progressed",
            SessionKind::Regression => "regressed",
        }
    }

    pub fn parse_answer(self, answer: &str) -> Result<Answer, VttError> {
        match answer {
            "real" => Ok(Truth::Real),
            a if a == self.synthetic_word() => Ok(Truth::Synthetic),
            other => Err(VttError::BadRequest(format!(
                "answer {other:?} is not \"real\" or {:?}",
                self.synthetic_word()
            ))),
        }
    }

    pub fn answer_word(self, answer: Answer) -> &'static str {
        match answer {
            Truth::Real => "real",
            Truth::Synthetic => self.synthetic_word(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Caae,
    Bapgan,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Caae => "caae",
            ModelTag::Bapgan => "bapgan",
        }
    }
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VttSessionSpec {
    pub kind: SessionKind,
    pub model_tag: ModelTag,
    pub dataset_tag: String,
    /// `(n_real, n_synthetic)`; kind default when absent.
    #[serde(default)]
    pub counts: Option<(usize, usize)>,
    #[serde(default)]
    pub shuffle_seed: u64,
}

impl VttSessionSpec {
    pub fn new(kind: SessionKind, model_tag: ModelTag, dataset_tag: &str, shuffle_seed: u64) -> Self {
        Self {
            kind,
            model_tag,
            dataset_tag: dataset_tag.to_string(),
            counts: None,
            shuffle_seed,
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        self.counts.unwrap_or_else(|| self.kind.default_counts())
    }

    pub fn validate(&self) -> Result<(), VttError> {
        let (r, s) = self.counts();
        if r == 0 || s == 0 {
            return Err(VttError::BadRequest(format!("counts must be positive, got ({r}, {s})")));
        }
        if self.dataset_tag.is_empty() || self.dataset_tag.contains(['/', '\\']) || self.dataset_tag.starts_with('.') {
            return Err(VttError::BadRequest(format!("invalid dataset tag {:?}", self.dataset_tag)));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VttError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("insufficient eligible images: {0}")]
    Shortfall(String),
    #[error("nothing to score: {0}")]
    Empty(String),
    #[error("model error: {0}")]
    Model(#[from] bapgan_core::Error),
    #[error("storage error on {path}: {source}")]
    Storage {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt session log {path} line {line}: {message}")]
    CorruptLog {
        path: std::path::PathBuf,
        line: usize,
        message: String,
    },
}

impl VttError {
    pub(crate) fn storage(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        VttError::Storage {
            path: path.into(),
            source,
        }
    }
}
