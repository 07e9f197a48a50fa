//! Chat-completion and embedding backends behind two small traits, plus the
//! deterministic implementations used offline: a scripted chat mock and a
//! hashing embedder.

mod embed;
mod http;
mod mock;
pub mod prompt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use embed::{CachingEmbedder, EmbeddingVector, HashingEmbedder};
pub use http::{HttpResponse, HttpTransport, OpenAiChat, OpenAiEmbedder, ProviderConfig, TransportFailure, UreqTransport};
pub use mock::{MockChat, MockEntry, MockMatch};

pub const API_KEY_ENV: &str = "INTA_API_KEY";
pub const BASE_URL_ENV: &str = "INTA_BASE_URL";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after retries")]
    RateLimited,
    #[error("request timed out after retries")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no scripted reply for request {hash} (last user message starts {preview:?})")]
    UnscriptedRequest { hash: String, preview: String },
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            messages: vec![ChatMessage::user(user)],
            temperature: 0.0,
            max_tokens: 4096,
        }
    }

    /// Continues a dialogue: appends the assistant reply and a new user turn.
    pub fn follow_up(&self, reply: &str, user: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.messages.push(ChatMessage::assistant(reply));
        next.messages.push(ChatMessage::user(user));
        next
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.temperature >= 0.0) {
            return Err(ProviderError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest("no messages".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return Err(ProviderError::InvalidRequest(format!("message {i}: roles must alternate user/assistant")));
            }
        }
        Ok(())
    }

    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    /// Canonical serialization: compact JSON in field declaration order.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    /// Lowercase hex SHA-256 of [`ChatRequest::canonical`].
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    /// One vector per input text, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for &T {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(request)
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for Box<T> {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(request)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for &T {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
}

/// The pair of backends a pipeline run talks to.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub chat: &'a dyn ChatProvider,
    pub embed: &'a dyn EmbeddingProvider,
}
