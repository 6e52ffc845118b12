//! Retrieval-augmented block completion: queries, prompts, backends, output
//! repair and the case-level autofill loop.

mod autofill;
mod backend;
mod mock;
mod parse;
mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_index::EmbedIndexError;

pub use autofill::{autofill_case, retrieve_context, AutofillOutcome, BlockCompletion, Retriever, DEFAULT_K};
pub use backend::{backend_for, complete_block, CallError, ChatBackend, HttpChatBackend, MockBackend};
pub use mock::{mock_complete, PatternRule, PatternTable};
pub use parse::{parse_model_output, render_output};
pub use prompt::{assemble_prompt, build_block_query, BlockQuery, ContextItem, PromptBundle, PromptTemplate, NO_CONTEXT_MARKER};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend {backend_id} timed out after {attempts} attempt(s)")]
    BackendTimeout { backend_id: String, attempts: u32 },
    #[error("backend {backend_id} failed after {attempts} attempt(s): {detail}")]
    BackendFailure {
        backend_id: String,
        attempts: u32,
        detail: String,
    },
    #[error("no JSON object found in model output")]
    UnparseableOutput,
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] EmbedIndexError),
    #[error("invalid model profile {backend_id}: {detail}")]
    InvalidProfile { backend_id: String, detail: String },
    #[error("invalid pattern table: {0}")]
    PatternTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_s: f64,
    /// Extra attempts after the first failed call.
    pub retries: u32,
    /// Artificial per-call delay of the mock backend.
    pub mock_delay_ms: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
            timeout_s: 60.0,
            retries: 2,
            mock_delay_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub backend_id: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub params: ModelParams,
}

impl ModelProfile {
    pub fn mock(backend_id: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::Mock,
            endpoint: None,
            params: ModelParams::default(),
        }
    }

    pub fn http_chat(backend_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.into()),
            params: ModelParams::default(),
        }
    }

    pub fn with_params(mut self, params: ModelParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |detail: &str| GenerationError::InvalidProfile {
            backend_id: self.backend_id.clone(),
            detail: detail.to_string(),
        };
        if !crate::fsutil::is_safe_id(&self.backend_id) {
            return Err(bad("backend_id must be a short [A-Za-z0-9._-] name"));
        }
        if !(self.params.temperature.is_finite() && self.params.temperature >= 0.0) {
            return Err(bad("temperature must be a finite value >= 0"));
        }
        if !(self.params.timeout_s.is_finite() && self.params.timeout_s > 0.0) {
            return Err(bad("timeout_s must be positive"));
        }
        if self.kind == BackendKind::HttpChat && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return Err(bad("http_chat requires an endpoint"));
        }
        Ok(())
    }
}
