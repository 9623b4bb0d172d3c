//! Backend configuration file and construction of the service stacks.
//!
//! ```json
//! {
//!   "cache_dir": "cache",
//!   "llm":     { "endpoint": "https://api.example.com/v1/chat/completions", "model": "gpt-3.5-turbo",
//!                "api_key_env": "OPENAI_API_KEY", "timeout_ms": 60000,
//!                "rate": { "capacity": 5, "per_second": 1.0 },
//!                "retry": { "max_attempts": 4, "base_delay_ms": 500, "backoff_factor": 2.0 } },
//!   "vqa":     { "endpoint": "http://localhost:8000/vqa", "model": "blip2", "json_response_path": "answer" },
//!   "caption": { "kind": "mock", "model": "mock", "script": "vision.json" }
//! }
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mock::{ScriptedLlm, ScriptedVision};
use super::{
    with_cache, with_retry, CacheStats, CacheStore, ChatRequest, ChatResponse, DiskStore, DynLlm, DynVision, HttpLlm,
    HttpVision, MeterHandle, Metered, RateLimited, RetryPolicy, Service, TokenBucket, VisionRequest, VisionResponse,
    DEFAULT_CAPTION_PROMPT,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading backend config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing backend config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid backend config: {0}")]
    Invalid(String),
    #[error("environment variable `{0}` holding the API token is not set")]
    MissingToken(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub capacity: u32,
    pub per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionConfig {
    #[serde(default)]
    pub kind: SectionKind,
    pub model: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub json_response_path: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub rate: Option<RateConfig>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
    /// Script file for `kind: mock`.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Caption prompt (caption section only).
    #[serde(default)]
    pub prompt: Option<String>,
    /// Sampling parameters (llm section only).
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub llm: SectionConfig,
    pub vqa: SectionConfig,
    pub caption: SectionConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Sampling parameters used for every chat request. Temperature 0 and a
/// fixed seed by default so rationales are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { model: "mock".into(), temperature: 0.0, max_tokens: 512, seed: Some(0) }
    }
}

/// Everything the pipeline needs to reach the three services.
#[derive(Clone)]
pub struct Backends {
    pub llm: DynLlm,
    pub vqa: DynVision,
    pub captioner: DynVision,
    pub generation: GenerationParams,
    pub vqa_model: String,
    pub caption_model: String,
    pub caption_prompt: String,
}

impl Backends {
    /// Bundles services with default sampling and model names.
    pub fn new(llm: DynLlm, vqa: DynVision, captioner: DynVision) -> Self {
        Backends {
            llm,
            vqa,
            captioner,
            generation: GenerationParams::default(),
            vqa_model: "mock".into(),
            caption_model: "mock".into(),
            caption_prompt: DEFAULT_CAPTION_PROMPT.into(),
        }
    }
}

/// Counters collected while the built stacks run.
#[derive(Debug, Clone, Default)]
pub struct Telemetry {
    pub llm: MeterHandle,
    pub vqa: MeterHandle,
    pub caption: MeterHandle,
    pub caches: Vec<CacheStats>,
}

impl Telemetry {
    /// Requests that reached a real (or mock) service, retries included.
    pub fn backend_calls(&self) -> u64 {
        self.llm.calls() + self.vqa.calls() + self.caption.calls()
    }

    pub fn cache_hits(&self) -> u64 {
        self.caches.iter().map(CacheStats::hits).sum()
    }
}

type DynService<Req, Resp> = Arc<dyn Service<Request = Req, Response = Resp>>;

fn stack<Req, Resp>(
    inner: DynService<Req, Resp>,
    section: &SectionConfig,
    store: Option<&Arc<dyn CacheStore>>,
) -> Result<(DynService<Req, Resp>, MeterHandle, Option<CacheStats>), ConfigError>
where
    Req: serde::Serialize + super::Keyed + Send + Sync + 'static,
    Resp: super::Cacheable,
{
    let metered = Metered::new(inner);
    let meter = metered.handle();
    let mut svc: DynService<Req, Resp> = Arc::new(metered);
    if let Some(rate) = &section.rate {
        let bucket = TokenBucket::new(rate.capacity, rate.per_second).map_err(ConfigError::Invalid)?;
        svc = Arc::new(RateLimited::new(svc, bucket));
    }
    if let Some(policy) = &section.retry {
        policy.validate().map_err(ConfigError::Invalid)?;
        svc = Arc::new(with_retry(svc, policy.clone()));
    }
    let mut stats = None;
    if let Some(store) = store {
        let cached = with_cache(svc, store.clone());
        stats = Some(cached.stats());
        svc = Arc::new(cached);
    }
    Ok((svc, meter, stats))
}

impl BackendConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut cfg: BackendConfig = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        BackendConfig::from_json(&text, base)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir.as_deref().map(|p| self.resolve(p))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, s) in [("llm", &self.llm), ("vqa", &self.vqa), ("caption", &self.caption)] {
            let invalid = |m: &str| Err(ConfigError::Invalid(format!("{name}: {m}")));
            match s.kind {
                SectionKind::Http if s.endpoint.is_none() => return invalid("http backend needs an endpoint"),
                SectionKind::Mock if s.script.is_none() => return invalid("mock backend needs a script"),
                _ => {}
            }
            if s.timeout_ms == 0 {
                return invalid("timeout_ms must be positive");
            }
            if let Some(t) = s.temperature {
                if !(t.is_finite() && t >= 0.0) {
                    return invalid("temperature must be non-negative");
                }
            }
            if s.max_tokens == Some(0) {
                return invalid("max_tokens must be positive");
            }
            if let Some(p) = &s.retry {
                p.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
            }
            if let Some(r) = &s.rate {
                TokenBucket::new(r.capacity, r.per_second).map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    fn token(&self, s: &SectionConfig) -> Result<Option<String>, ConfigError> {
        match &s.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| ConfigError::MissingToken(var.clone())),
        }
    }

    fn llm_service(&self) -> Result<DynLlm, ConfigError> {
        let s = &self.llm;
        Ok(match s.kind {
            SectionKind::Http => Arc::new(HttpLlm::new(
                s.endpoint.clone().unwrap_or_default(),
                self.token(s)?,
                s.json_response_path.clone(),
                Duration::from_millis(s.timeout_ms),
            )),
            SectionKind::Mock => {
                let path = self.resolve(s.script.as_deref().unwrap_or(Path::new("")));
                Arc::new(ScriptedLlm::from_file(&path).map_err(|source| ConfigError::Io { path, source })?)
            }
        })
    }

    fn vision_service(&self, s: &SectionConfig) -> Result<DynVision, ConfigError> {
        Ok(match s.kind {
            SectionKind::Http => Arc::new(HttpVision::new(
                s.endpoint.clone().unwrap_or_default(),
                self.token(s)?,
                s.json_response_path.clone(),
                Duration::from_millis(s.timeout_ms),
            )),
            SectionKind::Mock => {
                let path = self.resolve(s.script.as_deref().unwrap_or(Path::new("")));
                Arc::new(ScriptedVision::from_file(&path).map_err(|source| ConfigError::Io { path, source })?)
            }
        })
    }

    /// Builds `Cached(Retry(RateLimited(Metered(service))))` per section.
    pub fn build(&self) -> Result<(Backends, Telemetry), ConfigError> {
        let store: Option<Arc<dyn CacheStore>> =
            self.cache_dir().map(|d| Arc::new(DiskStore::new(d)) as Arc<dyn CacheStore>);
        let (llm, llm_meter, llm_cache) =
            stack::<ChatRequest, ChatResponse>(self.llm_service()?, &self.llm, store.as_ref())?;
        let (vqa, vqa_meter, vqa_cache) =
            stack::<VisionRequest, VisionResponse>(self.vision_service(&self.vqa)?, &self.vqa, store.as_ref())?;
        let (captioner, cap_meter, cap_cache) =
            stack::<VisionRequest, VisionResponse>(self.vision_service(&self.caption)?, &self.caption, store.as_ref())?;

        let defaults = GenerationParams::default();
        let backends = Backends {
            llm,
            vqa,
            captioner,
            generation: GenerationParams {
                model: self.llm.model.clone(),
                temperature: self.llm.temperature.unwrap_or(defaults.temperature),
                max_tokens: self.llm.max_tokens.unwrap_or(defaults.max_tokens),
                seed: self.llm.seed.or(defaults.seed),
            },
            vqa_model: self.vqa.model.clone(),
            caption_model: self.caption.model.clone(),
            caption_prompt: self.caption.prompt.clone().unwrap_or_else(|| DEFAULT_CAPTION_PROMPT.into()),
        };
        let telemetry = Telemetry {
            llm: llm_meter,
            vqa: vqa_meter,
            caption: cap_meter,
            caches: [llm_cache, vqa_cache, cap_cache].into_iter().flatten().collect(),
        };
        Ok((backends, telemetry))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HTTP: &str = r#"{
        "cache_dir": "cache",
        "llm": {"endpoint": "http://127.0.0.1:9/v1/chat", "model": "gpt", "rate": {"capacity": 2, "per_second": 1.0},
                "retry": {"max_attempts": 3, "base_delay_ms": 10, "backoff_factor": 2.0}},
        "vqa": {"endpoint": "http://127.0.0.1:9/vqa", "model": "blip2", "json_response_path": "answer"},
        "caption": {"endpoint": "http://127.0.0.1:9/caption", "model": "blip2"}
    }"#;

    #[test]
    fn parses_http_config() {
        let cfg = BackendConfig::from_json(HTTP, "/etc/ddcot").unwrap();
        assert_eq!(cfg.llm.kind, SectionKind::Http);
        assert_eq!(cfg.llm.timeout_ms, 60_000);
        assert_eq!(cfg.llm.retry.as_ref().unwrap().max_attempts, 3);
        assert!(cfg.llm.retry.as_ref().unwrap().is_retryable(super::super::ErrorClass::RateLimited));
        assert_eq!(cfg.cache_dir().unwrap(), PathBuf::from("/etc/ddcot/cache"));
        let (b, t) = cfg.build().unwrap();
        assert_eq!(b.generation.temperature, 0.0);
        assert_eq!(b.generation.seed, Some(0));
        assert_eq!(t.caches.len(), 3);
    }

    #[test]
    fn http_without_endpoint_rejected() {
        let text = HTTP.replace(r#""endpoint": "http://127.0.0.1:9/vqa", "#, "");
        assert!(matches!(BackendConfig::from_json(&text, "."), Err(ConfigError::Invalid(m)) if m.starts_with("vqa")));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = HTTP.replace(r#""model": "gpt""#, r#""model": "gpt", "temprature": 1"#);
        assert!(matches!(BackendConfig::from_json(&text, "."), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn bad_retry_rejected() {
        let text = HTTP.replace(r#""backoff_factor": 2.0"#, r#""backoff_factor": 0.5"#);
        assert!(matches!(BackendConfig::from_json(&text, "."), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn missing_token_env() {
        let text = HTTP.replace(r#""model": "gpt""#, r#""model": "gpt", "api_key_env": "DDCOT_TEST_SURELY_UNSET_VAR""#);
        let cfg = BackendConfig::from_json(&text, ".").unwrap();
        assert!(matches!(cfg.build(), Err(ConfigError::MissingToken(v)) if v == "DDCOT_TEST_SURELY_UNSET_VAR"));
    }
}
