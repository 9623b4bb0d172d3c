//! Clients for the external model services.
//!
//! Every service (chat LLM, VQA, captioner) implements [`Service`]. Caching,
//! retry, rate limiting and metering are generic wrappers over any
//! [`Service`], so the same stack serves all three roles. The recommended
//! layering is `Cached(Retry(RateLimited(inner)))`: cache hits never consume
//! rate-limit tokens and every retry attempt does.

mod cache;
pub mod config;
mod http;
mod meter;
pub mod mock;
mod rate;
mod retry;

use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ImageRef;

pub use config::{BackendConfig, Backends, GenerationParams, Telemetry};
pub use cache::{with_cache, CacheKey, CacheStats, CacheStore, Cached, DiskStore, MemoryStore};
pub use http::{lookup_json_path, HttpLlm, HttpVision};
pub use meter::{Metered, MeterHandle};
pub use rate::{RateLimited, TokenBucket};
pub use retry::{with_retry, Retry, RetryPolicy};

/// Failure classes surfaced by every backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Network,
    RateLimited,
    ServerError,
    MalformedResponse,
    AuthFailure,
    ImageNotFound,
    /// The request itself violated its contract and was never sent.
    InvalidRequest,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Network => "network",
            ErrorClass::RateLimited => "rate_limited",
            ErrorClass::ServerError => "server_error",
            ErrorClass::MalformedResponse => "malformed_response",
            ErrorClass::AuthFailure => "auth_failure",
            ErrorClass::ImageNotFound => "image_not_found",
            ErrorClass::InvalidRequest => "invalid_request",
        }
    }

    /// Default retry set: throttling and server-side faults.
    pub fn retryable_by_default(self) -> bool {
        matches!(self, ErrorClass::RateLimited | ErrorClass::ServerError)
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{class}: {message}")]
pub struct BackendError {
    pub class: ErrorClass,
    pub message: String,
}

impl BackendError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        BackendError { class, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::new(ErrorClass::InvalidRequest, m));
        match self.messages.last() {
            None => return bad("no messages"),
            Some(m) if m.role != Role::User => return bad("last message must come from the user"),
            _ => {}
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be finite and non-negative");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }

    /// Text of the final user message.
    pub fn prompt(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

impl FinishReason {
    pub fn from_wire(s: Option<&str>) -> Self {
        match s {
            None | Some("stop") | Some("end_turn") | Some("eos") => FinishReason::Stop,
            Some("length") | Some("max_tokens") => FinishReason::Length,
            Some(_) => FinishReason::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub finish_reason: FinishReason,
    #[serde(skip)]
    pub cache_hit: bool,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            finish_reason: FinishReason::Stop,
            cache_hit: false,
        }
    }

    pub fn truncated(&self) -> bool {
        self.finish_reason == FinishReason::Length
    }
}

/// Which job a vision request asks for. VQA and captioning share one wire
/// shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionMode {
    Vqa,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionRequest {
    pub mode: VisionMode,
    pub model: String,
    pub image: ImageRef,
    pub question: String,
}

impl VisionRequest {
    pub fn vqa(model: impl Into<String>, image: ImageRef, question: impl Into<String>) -> Self {
        VisionRequest { mode: VisionMode::Vqa, model: model.into(), image, question: question.into() }
    }

    pub fn caption(model: impl Into<String>, image: ImageRef, prompt: impl Into<String>) -> Self {
        VisionRequest { mode: VisionMode::Caption, model: model.into(), image, question: prompt.into() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.question.trim().is_empty() {
            return Err(BackendError::new(ErrorClass::InvalidRequest, "empty question"));
        }
        if self.image.as_str().trim().is_empty() {
            return Err(BackendError::new(ErrorClass::ImageNotFound, "empty image reference"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionResponse {
    pub text: String,
    #[serde(skip)]
    pub cache_hit: bool,
}

impl VisionResponse {
    pub fn new(text: impl Into<String>) -> Self {
        VisionResponse { text: text.into(), cache_hit: false }
    }
}

/// Requests name the model that serves them; the name is part of the cache key.
pub trait Keyed {
    fn model(&self) -> &str;
}

impl Keyed for ChatRequest {
    fn model(&self) -> &str {
        &self.model
    }
}

impl Keyed for VisionRequest {
    fn model(&self) -> &str {
        &self.model
    }
}

/// Responses that can be stored and flagged as served from cache.
pub trait Cacheable: Serialize + DeserializeOwned + Clone + Send + Sync + 'static {
    fn set_cache_hit(&mut self, hit: bool);
    fn cache_hit(&self) -> bool;
}

impl Cacheable for ChatResponse {
    fn set_cache_hit(&mut self, hit: bool) {
        self.cache_hit = hit;
    }

    fn cache_hit(&self) -> bool {
        self.cache_hit
    }
}

impl Cacheable for VisionResponse {
    fn set_cache_hit(&mut self, hit: bool) {
        self.cache_hit = hit;
    }

    fn cache_hit(&self) -> bool {
        self.cache_hit
    }
}

/// An asynchronous request/response model service.
#[async_trait]
pub trait Service: Send + Sync {
    type Request: Serialize + Keyed + Send + Sync;
    type Response: Cacheable;

    /// Backend kind, mixed into cache keys (`"llm"`, `"vision"`).
    fn kind(&self) -> &'static str;

    async fn call(&self, req: &Self::Request) -> Result<Self::Response, BackendError>;
}

#[async_trait]
impl<S: Service + ?Sized> Service for Arc<S> {
    type Request = S::Request;
    type Response = S::Response;

    fn kind(&self) -> &'static str {
        (**self).kind()
    }

    async fn call(&self, req: &Self::Request) -> Result<Self::Response, BackendError> {
        (**self).call(req).await
    }
}

pub type DynLlm = Arc<dyn Service<Request = ChatRequest, Response = ChatResponse>>;
pub type DynVision = Arc<dyn Service<Request = VisionRequest, Response = VisionResponse>>;

/// Validates and sends a chat request.
pub async fn llm_complete<S>(backend: &S, req: &ChatRequest) -> Result<ChatResponse, BackendError>
where
    S: Service<Request = ChatRequest, Response = ChatResponse> + ?Sized,
{
    req.validate()?;
    backend.call(req).await
}

/// Asks a vision backend a question about an image.
pub async fn vqa_answer<S>(backend: &S, req: &VisionRequest) -> Result<VisionResponse, BackendError>
where
    S: Service<Request = VisionRequest, Response = VisionResponse> + ?Sized,
{
    req.validate()?;
    backend.call(req).await
}

/// Default prompt sent with caption requests.
pub const DEFAULT_CAPTION_PROMPT: &str = "Write a short caption describing this image.";

/// Fetches a caption through the shared vision interface.
pub async fn caption<S>(backend: &S, model: &str, image: &ImageRef) -> Result<VisionResponse, BackendError>
where
    S: Service<Request = VisionRequest, Response = VisionResponse> + ?Sized,
{
    let req = VisionRequest::caption(model, image.clone(), DEFAULT_CAPTION_PROMPT);
    req.validate()?;
    backend.call(&req).await
}
