use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendError, ErrorClass, Service};

/// Exponential backoff over a set of retryable error classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub backoff_factor: f64,
    #[serde(default = "default_retryable")]
    pub retryable: BTreeSet<ErrorClass>,
}

fn default_retryable() -> BTreeSet<ErrorClass> {
    [ErrorClass::RateLimited, ErrorClass::ServerError].into()
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay_ms: 500, backoff_factor: 2.0, retryable: default_retryable() }
    }
}

impl RetryPolicy {
    pub fn new(max_attempts: u32, base_delay_ms: u64, backoff_factor: f64) -> Result<Self, String> {
        let p = RetryPolicy { max_attempts, base_delay_ms, backoff_factor, retryable: default_retryable() };
        p.validate()?;
        Ok(p)
    }

    /// A policy that makes exactly one attempt.
    pub fn none() -> Self {
        RetryPolicy { max_attempts: 1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts < 1 {
            return Err("retry.max_attempts must be at least 1".into());
        }
        if !(self.backoff_factor.is_finite() && self.backoff_factor > 1.0) {
            return Err("retry.backoff_factor must be greater than 1".into());
        }
        Ok(())
    }

    pub fn is_retryable(&self, class: ErrorClass) -> bool {
        self.retryable.contains(&class)
    }

    /// Pause after failed attempt `attempt` (1-based): base · factor^(attempt−1).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.backoff_factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64((ms / 1000.0).min(3600.0))
    }
}

pub struct Retry<S> {
    inner: S,
    policy: RetryPolicy,
    attempts: AtomicU64,
}

pub fn with_retry<S: Service>(inner: S, policy: RetryPolicy) -> Retry<S> {
    Retry { inner, policy, attempts: AtomicU64::new(0) }
}

impl<S> Retry<S> {
    pub fn inner(&self) -> &S {
        &self.inner
    }

    /// Total attempts made through this wrapper.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<S: Service> Service for Retry<S> {
    type Request = S::Request;
    type Response = S::Response;

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    async fn call(&self, req: &Self::Request) -> Result<Self::Response, BackendError> {
        let mut attempt = 1;
        loop {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match self.inner.call(req).await {
                Ok(r) => return Ok(r),
                Err(e) if attempt < self.policy.max_attempts && self.policy.is_retryable(e.class) => {
                    let pause = self.policy.delay_after(attempt);
                    tracing::debug!(attempt, error = %e, ?pause, "retrying");
                    tokio::time::sleep(pause).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
