//! Model-service interfaces, their HTTP clients and seeded mocks.
//!
//! Each external model sits behind a small trait. [`BackendSuite`] bundles
//! one implementation per role and layers the shared contracts on top:
//! response caching, detection clamping, dimension checks and the degenerate
//! box guard.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Picture;
use crate::records::BoundingBox;

pub mod cache;
pub mod entities;
pub mod http;
pub mod mock;
pub mod remote;
mod suite;

pub use cache::ResponseCache;
pub use entities::LexiconExtractor;
pub use suite::{BackendSuite, Embedders, Served, DEFAULT_MIN_BOX_AREA};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("empty completion")]
    EmptyCompletion,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("degenerate box: area {area} below minimum {min}")]
    DegenerateBox { area: u64, min: u64 },
    #[error("image error: {0}")]
    Image(String),
}

impl BackendError {
    /// Transport, rate-limit and 5xx failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport(_) | BackendError::RateLimited { .. } | BackendError::Server { .. }
        )
    }

    /// Short label used in failure histograms.
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "transport",
            BackendError::RateLimited { .. } => "rate-limited",
            BackendError::Server { .. } => "server-error",
            BackendError::Rejected { .. } => "rejected",
            BackendError::EmptyCompletion => "empty-completion",
            BackendError::Precondition(_) => "precondition",
            BackendError::InvalidResponse(_) => "invalid-response",
            BackendError::DimensionMismatch { .. } => "dimension-mismatch",
            BackendError::DegenerateBox { .. } => "degenerate-box",
            BackendError::Image(_) => "image",
        }
    }
}

impl From<crate::imaging::ImagingError> for BackendError {
    fn from(e: crate::imaging::ImagingError) -> Self {
        BackendError::Image(e.to_string())
    }
}

/// Which prompt family produced a chat request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPurpose {
    Generate,
    Select,
    Replace,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    /// Honored by the mock; forwarded to remote endpoints as a hint.
    pub seed: u64,
    /// Prompt family and the values substituted into its template. Remote
    /// clients do not send these; the mock uses them to shape its replies.
    pub purpose: PromptPurpose,
    pub slots: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        ChatRequest {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 0.0,
            seed: 0,
            purpose: PromptPurpose::Other,
            slots: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.user_text.trim().is_empty() {
            return Err(BackendError::Precondition("user_text is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Precondition(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Caption text plus a note when the backend had to fall back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub warning: Option<String>,
}

/// Identity reported into sample provenance.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
}

pub trait ChatBackend: Backend {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

pub trait CaptionBackend: Backend {
    fn caption(&self, image: &Picture) -> Result<Caption, BackendError>;
}

pub trait EntityBackend: Backend {
    /// Ordered, deduplicated categories in order of first appearance.
    fn extract_entities(&self, caption: &str) -> Result<Vec<String>, BackendError>;
}

pub trait GroundingBackend: Backend {
    /// Raw detections; the suite clamps and sorts them.
    fn ground(&self, image: &Picture, category: &str) -> Result<Vec<RawDetection>, BackendError>;
}

pub trait InpaintBackend: Backend {
    fn inpaint_replace(
        &self,
        image: &Picture,
        selected: &str,
        bbox: &BoundingBox,
        target: &str,
    ) -> Result<Picture, BackendError>;
}

pub trait ConditionedEditBackend: Backend {
    fn conditioned_edit(&self, image: &Picture, instruction: &str) -> Result<Picture, BackendError>;
}

pub trait ImageEmbedder: Backend {
    fn embed_image(&self, image: &Picture) -> Result<Vec<f64>, BackendError>;
}

pub trait TextEmbedder: Backend {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// Detection as returned by a grounding service, before clamping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub category: String,
    pub coords: [f64; 4],
    pub score: f64,
}
