use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{
    BackendError, ChatRequest, ChatResponse, ErrorClass, FinishReason, Role, Service, VisionMode, VisionRequest,
    VisionResponse,
};

/// Looks up a dotted path such as `choices.0.message.content` or
/// `choices[0].message.content`.
pub fn lookup_json_path<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    let normalized = path.replace('[', ".").replace(']', "");
    normalized
        .split('.')
        .filter(|s| !s.is_empty())
        .try_fold(v, |cur, seg| match cur {
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
            Value::Object(map) => map.get(seg),
            _ => None,
        })
}

pub(crate) fn status_class(status: StatusCode) -> ErrorClass {
    match status.as_u16() {
        401 | 403 => ErrorClass::AuthFailure,
        408 => ErrorClass::Network,
        429 => ErrorClass::RateLimited,
        500..=599 => ErrorClass::ServerError,
        // a rejected request shape cannot be fixed by retrying
        _ => ErrorClass::MalformedResponse,
    }
}

fn transport(e: reqwest::Error) -> BackendError {
    BackendError::new(ErrorClass::Network, e.to_string())
}

async fn post_json(
    client: &reqwest::Client,
    endpoint: &str,
    token: Option<&str>,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut builder = client.post(endpoint).json(body);
    if let Some(t) = token {
        builder = builder.bearer_auth(t);
    }
    let resp = builder.send().await.map_err(transport)?;
    let status = resp.status();
    let text = resp.text().await.map_err(transport)?;
    if !status.is_success() {
        let snippet: String = text.chars().take(200).collect();
        return Err(BackendError::new(status_class(status), format!("HTTP {status}: {snippet}")));
    }
    serde_json::from_str(&text)
        .map_err(|e| BackendError::new(ErrorClass::MalformedResponse, format!("response is not JSON: {e}")))
}

fn client(timeout: Duration) -> reqwest::Client {
    reqwest::Client::builder()
        .timeout(timeout)
        .build()
        .expect("HTTP client configuration is static")
}

/// Chat-completions style LLM over HTTP.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    client: reqwest::Client,
    endpoint: String,
    token: Option<String>,
    response_path: String,
    finish_path: String,
}

impl HttpLlm {
    pub const DEFAULT_RESPONSE_PATH: &'static str = "choices.0.message.content";
    pub const DEFAULT_FINISH_PATH: &'static str = "choices.0.finish_reason";

    pub fn new(endpoint: impl Into<String>, token: Option<String>, response_path: Option<String>, timeout: Duration) -> Self {
        HttpLlm {
            client: client(timeout),
            endpoint: endpoint.into(),
            token,
            response_path: response_path.unwrap_or_else(|| Self::DEFAULT_RESPONSE_PATH.into()),
            finish_path: Self::DEFAULT_FINISH_PATH.into(),
        }
    }

    pub fn body(req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        let mut body = json!({
            "model": req.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    pub fn parse(&self, v: &Value) -> Result<ChatResponse, BackendError> {
        let text = lookup_json_path(v, &self.response_path)
            .and_then(Value::as_str)
            .ok_or_else(|| {
                BackendError::new(ErrorClass::MalformedResponse, format!("no string at `{}`", self.response_path))
            })?;
        let usage = |k: &str| lookup_json_path(v, &format!("usage.{k}")).and_then(Value::as_u64).unwrap_or(0);
        Ok(ChatResponse {
            text: text.to_string(),
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
            finish_reason: FinishReason::from_wire(lookup_json_path(v, &self.finish_path).and_then(Value::as_str)),
            cache_hit: false,
        })
    }
}

#[async_trait]
impl Service for HttpLlm {
    type Request = ChatRequest;
    type Response = ChatResponse;

    fn kind(&self) -> &'static str {
        "llm"
    }

    async fn call(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let v = post_json(&self.client, &self.endpoint, self.token.as_deref(), &Self::body(req)).await?;
        self.parse(&v)
    }
}

/// VQA or caption model over HTTP. Local images are sent base64-encoded,
/// URLs are passed through.
#[derive(Debug, Clone)]
pub struct HttpVision {
    client: reqwest::Client,
    endpoint: String,
    token: Option<String>,
    response_path: String,
}

impl HttpVision {
    pub const DEFAULT_RESPONSE_PATH: &'static str = "answer";

    pub fn new(endpoint: impl Into<String>, token: Option<String>, response_path: Option<String>, timeout: Duration) -> Self {
        HttpVision {
            client: client(timeout),
            endpoint: endpoint.into(),
            token,
            response_path: response_path.unwrap_or_else(|| Self::DEFAULT_RESPONSE_PATH.into()),
        }
    }

    pub async fn body(req: &VisionRequest) -> Result<Value, BackendError> {
        let image = if req.image.is_url() {
            req.image.as_str().to_string()
        } else {
            let path = Path::new(req.image.as_str());
            let bytes = tokio::fs::read(path).await.map_err(|e| {
                BackendError::new(ErrorClass::ImageNotFound, format!("{}: {e}", path.display()))
            })?;
            base64::engine::general_purpose::STANDARD.encode(bytes)
        };
        let mode = match req.mode {
            VisionMode::Vqa => "vqa",
            VisionMode::Caption => "caption",
        };
        Ok(json!({ "model": req.model, "mode": mode, "image": image, "question": req.question }))
    }
}

#[async_trait]
impl Service for HttpVision {
    type Request = VisionRequest;
    type Response = VisionResponse;

    fn kind(&self) -> &'static str {
        "vision"
    }

    async fn call(&self, req: &VisionRequest) -> Result<VisionResponse, BackendError> {
        req.validate()?;
        let body = Self::body(req).await?;
        let v = post_json(&self.client, &self.endpoint, self.token.as_deref(), &body).await?;
        let text = lookup_json_path(&v, &self.response_path).and_then(Value::as_str).ok_or_else(|| {
            BackendError::new(ErrorClass::MalformedResponse, format!("no string at `{}`", self.response_path))
        })?;
        Ok(VisionResponse::new(text.trim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_paths() {
        let v = json!({"choices": [{"message": {"content": "hi"}}], "a": {"b": 3}});
        assert_eq!(lookup_json_path(&v, "choices.0.message.content"), Some(&json!("hi")));
        assert_eq!(lookup_json_path(&v, "choices[0].message.content"), Some(&json!("hi")));
        assert_eq!(lookup_json_path(&v, "a.b"), Some(&json!(3)));
        assert_eq!(lookup_json_path(&v, "choices.1"), None);
        assert_eq!(lookup_json_path(&v, "a.b.c"), None);
    }

    #[test]
    fn status_mapping() {
        assert_eq!(status_class(StatusCode::TOO_MANY_REQUESTS), ErrorClass::RateLimited);
        assert_eq!(status_class(StatusCode::UNAUTHORIZED), ErrorClass::AuthFailure);
        assert_eq!(status_class(StatusCode::FORBIDDEN), ErrorClass::AuthFailure);
        assert_eq!(status_class(StatusCode::BAD_GATEWAY), ErrorClass::ServerError);
        assert_eq!(status_class(StatusCode::BAD_REQUEST), ErrorClass::MalformedResponse);
    }

    #[test]
    fn chat_body_shape() {
        let req = ChatRequest {
            model: "gpt".into(),
            messages: vec![super::super::ChatMessage::user("q")],
            temperature: 0.0,
            max_tokens: 32,
            seed: Some(7),
        };
        let b = HttpLlm::body(&req);
        assert_eq!(
            b,
            json!({"model": "gpt", "messages": [{"role": "user", "content": "q"}], "temperature": 0.0, "max_tokens": 32, "seed": 7})
        );
    }

    #[tokio::test]
    async fn missing_local_image() {
        let req = VisionRequest::vqa("blip", crate::model::ImageRef::new("/definitely/not/here.png"), "what?");
        assert_eq!(HttpVision::body(&req).await.unwrap_err().class, ErrorClass::ImageNotFound);
    }
}
