//! Deterministic scripted backends for offline runs and tests.
//!
//! An LLM script maps exact prompts to replies and falls back to ordered
//! substring rules; a vision script maps `(image, question)` pairs to
//! answers and images to captions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChatRequest, ChatResponse, ErrorClass, FinishReason, Service, VisionMode, VisionRequest,
    VisionResponse,
};
use crate::model::ImageRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    /// Every substring must occur in the prompt.
    pub all_of: Vec<String>,
    /// Reply text; ignored when `error` is set.
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub finish_reason: Option<FinishReason>,
    #[serde(default)]
    pub error: Option<ErrorClass>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LlmScript {
    #[serde(default)]
    pub exact: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub default: Option<String>,
}

impl LlmScript {
    pub fn rule(mut self, all_of: &[&str], response: impl Into<String>) -> Self {
        self.rules.push(Rule {
            all_of: all_of.iter().map(|s| s.to_string()).collect(),
            response: response.into(),
            finish_reason: None,
            error: None,
        });
        self
    }

    pub fn exact(mut self, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        self.exact.insert(prompt.into(), response.into());
        self
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedLlm {
    script: LlmScript,
}

impl ScriptedLlm {
    pub fn new(script: LlmScript) -> Self {
        ScriptedLlm { script }
    }

    pub fn from_file(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        let script = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        Ok(ScriptedLlm { script })
    }

    pub fn respond(&self, prompt: &str) -> Result<ChatResponse, BackendError> {
        if let Some(r) = self.script.exact.get(prompt) {
            return Ok(ChatResponse::text(r.clone()));
        }
        if let Some(rule) = self.script.rules.iter().find(|r| r.all_of.iter().all(|s| prompt.contains(s.as_str()))) {
            if let Some(class) = rule.error {
                return Err(BackendError::new(class, "scripted failure"));
            }
            let mut resp = ChatResponse::text(rule.response.clone());
            resp.finish_reason = rule.finish_reason.unwrap_or(FinishReason::Stop);
            return Ok(resp);
        }
        match &self.script.default {
            Some(d) => Ok(ChatResponse::text(d.clone())),
            None => Err(BackendError::new(ErrorClass::MalformedResponse, "mock: no scripted reply for prompt")),
        }
    }
}

#[async_trait]
impl Service for ScriptedLlm {
    type Request = ChatRequest;
    type Response = ChatResponse;

    fn kind(&self) -> &'static str {
        "llm"
    }

    async fn call(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let mut resp = self.respond(req.prompt())?;
        resp.prompt_tokens = req.prompt().split_whitespace().count() as u64;
        resp.completion_tokens = resp.text.split_whitespace().count() as u64;
        Ok(resp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedAnswer {
    pub image: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionScript {
    /// Images the mock can "see"; anything else is `ImageNotFound`.
    #[serde(default)]
    pub images: BTreeSet<String>,
    #[serde(default)]
    pub answers: Vec<ScriptedAnswer>,
    #[serde(default)]
    pub captions: BTreeMap<String, String>,
    #[serde(default = "unknown")]
    pub default_answer: String,
    #[serde(default)]
    pub default_caption: Option<String>,
}

fn unknown() -> String {
    "unknown".into()
}

impl VisionScript {
    pub fn new() -> Self {
        VisionScript { default_answer: unknown(), ..Default::default() }
    }

    pub fn image(mut self, key: &str) -> Self {
        self.images.insert(key.into());
        self
    }

    pub fn answer(mut self, image: &str, question: &str, answer: &str) -> Self {
        self.images.insert(image.into());
        self.answers.push(ScriptedAnswer { image: image.into(), question: question.into(), answer: answer.into() });
        self
    }

    pub fn caption(mut self, image: &str, caption: &str) -> Self {
        self.images.insert(image.into());
        self.captions.insert(image.into(), caption.into());
        self
    }
}

/// Matches when the reference equals the key or ends with `/key`.
fn image_matches(image: &ImageRef, key: &str) -> bool {
    let s = image.as_str();
    s == key || s.strip_suffix(key).is_some_and(|head| head.ends_with('/') || head.ends_with('\\'))
}

fn question_key(q: &str) -> String {
    q.trim().to_lowercase()
}

#[derive(Debug, Clone)]
pub struct ScriptedVision {
    script: VisionScript,
}

impl ScriptedVision {
    pub fn new(script: VisionScript) -> Self {
        ScriptedVision { script }
    }

    pub fn from_file(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        let script = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        Ok(ScriptedVision { script })
    }

    pub fn respond(&self, req: &VisionRequest) -> Result<VisionResponse, BackendError> {
        let Some(key) = self.script.images.iter().find(|k| image_matches(&req.image, k)) else {
            return Err(BackendError::new(ErrorClass::ImageNotFound, format!("mock cannot see {}", req.image)));
        };
        let text = match req.mode {
            VisionMode::Caption => self
                .script
                .captions
                .get(key)
                .or(self.script.default_caption.as_ref())
                .cloned()
                .unwrap_or_else(|| self.script.default_answer.clone()),
            VisionMode::Vqa => self
                .script
                .answers
                .iter()
                .find(|a| &a.image == key && question_key(&a.question) == question_key(&req.question))
                .map(|a| a.answer.clone())
                .unwrap_or_else(|| self.script.default_answer.clone()),
        };
        Ok(VisionResponse::new(text))
    }
}

#[async_trait]
impl Service for ScriptedVision {
    type Request = VisionRequest;
    type Response = VisionResponse;

    fn kind(&self) -> &'static str {
        "vision"
    }

    async fn call(&self, req: &VisionRequest) -> Result<VisionResponse, BackendError> {
        req.validate()?;
        self.respond(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{caption, llm_complete, vqa_answer, ChatMessage};

    fn chat(prompt: &str) -> ChatRequest {
        ChatRequest { model: "mock".into(), messages: vec![ChatMessage::user(prompt)], temperature: 0.0, max_tokens: 64, seed: Some(0) }
    }

    #[tokio::test]
    async fn exact_prompt_lookup() {
        let llm = ScriptedLlm::new(LlmScript::default().exact("known prompt", "scripted text"));
        assert_eq!(llm_complete(&llm, &chat("known prompt")).await.unwrap().text, "scripted text");
        assert!(llm_complete(&llm, &chat("other")).await.is_err());
    }

    #[tokio::test]
    async fn substring_rule_fallback() {
        let llm = ScriptedLlm::new(
            LlmScript::default()
                .rule(&["deconstruct"], "Sub-question 1: What is shown?\nSub-answer 1: Uncertain")
                .with_default("fallback"),
        );
        let r = llm_complete(&llm, &chat("please deconstruct the question")).await.unwrap();
        assert!(r.text.starts_with("Sub-question 1"));
        assert_eq!(llm_complete(&llm, &chat("hello")).await.unwrap().text, "fallback");
    }

    #[tokio::test]
    async fn scripted_error_and_truncation() {
        let mut script = LlmScript::default();
        script.rules.push(Rule { all_of: vec!["fail".into()], response: String::new(), finish_reason: None, error: Some(ErrorClass::RateLimited) });
        script.rules.push(Rule { all_of: vec!["long".into()], response: "cut off".into(), finish_reason: Some(FinishReason::Length), error: None });
        let llm = ScriptedLlm::new(script);
        assert_eq!(llm_complete(&llm, &chat("fail now")).await.unwrap_err().class, ErrorClass::RateLimited);
        assert!(llm_complete(&llm, &chat("long one")).await.unwrap().truncated());
    }

    #[tokio::test]
    async fn vqa_scripted_and_default() {
        let v = ScriptedVision::new(VisionScript::new().answer("img1", "What food is shown?", "an orange"));
        let q = |question: &str| VisionRequest::vqa("blip", ImageRef::new("data/test/7/img1"), question);
        assert_eq!(vqa_answer(&v, &q("What food is shown?")).await.unwrap().text, "an orange");
        assert_eq!(vqa_answer(&v, &q("what food is shown? ")).await.unwrap().text, "an orange");
        assert_eq!(vqa_answer(&v, &q("How many?")).await.unwrap().text, "unknown");
    }

    #[tokio::test]
    async fn unresolvable_image() {
        let v = ScriptedVision::new(VisionScript::new().image("img1"));
        let req = VisionRequest::vqa("blip", ImageRef::new("nope.png"), "What?");
        assert_eq!(vqa_answer(&v, &req).await.unwrap_err().class, ErrorClass::ImageNotFound);
        // suffix must align with a path separator
        let req = VisionRequest::vqa("blip", ImageRef::new("ximg1"), "What?");
        assert_eq!(vqa_answer(&v, &req).await.unwrap_err().class, ErrorClass::ImageNotFound);
    }

    #[tokio::test]
    async fn caption_mode() {
        let v = ScriptedVision::new(VisionScript::new().caption("img_foodweb", "a food web"));
        let c = caption(&v, "blip", &ImageRef::new("img_foodweb")).await.unwrap();
        assert_eq!(c.text, "a food web");
        assert_eq!(
            caption(&v, "blip", &ImageRef::new("missing")).await.unwrap_err().class,
            ErrorClass::ImageNotFound
        );
    }
}
