use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;

use super::{BackendError, Service};

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: f64,
}

/// Token bucket with capacity `B` refilled continuously at `r` tokens per
/// second. Starts full, so any window of `w` seconds admits at most
/// `B + ⌈r·w⌉` requests.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    origin: Instant,
    state: Mutex<Bucket>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Result<Self, String> {
        if capacity == 0 {
            return Err("rate.capacity must be at least 1".into());
        }
        if !(per_second.is_finite() && per_second > 0.0) {
            return Err("rate.per_second must be positive".into());
        }
        Ok(TokenBucket {
            capacity: capacity as f64,
            per_second,
            origin: Instant::now(),
            state: Mutex::new(Bucket { tokens: capacity as f64, last: 0.0 }),
        })
    }

    /// Takes one token at time `now` (seconds on the bucket's own clock,
    /// non-decreasing). On refusal returns the seconds until a token frees.
    pub fn try_acquire_at(&self, now: f64) -> Result<(), f64> {
        let mut b = self.state.lock().unwrap();
        let now = now.max(b.last);
        b.tokens = (b.tokens + (now - b.last) * self.per_second).min(self.capacity);
        b.last = now;
        if b.tokens >= 1.0 {
            b.tokens -= 1.0;
            Ok(())
        } else {
            Err((1.0 - b.tokens) / self.per_second)
        }
    }

    pub async fn acquire(&self) {
        loop {
            let now = self.origin.elapsed().as_secs_f64();
            match self.try_acquire_at(now) {
                Ok(()) => return,
                Err(wait) => tokio::time::sleep(Duration::from_secs_f64(wait.max(1e-4))).await,
            }
        }
    }
}

pub struct RateLimited<S> {
    inner: S,
    bucket: TokenBucket,
}

impl<S: Service> RateLimited<S> {
    pub fn new(inner: S, bucket: TokenBucket) -> Self {
        RateLimited { inner, bucket }
    }
}

#[async_trait]
impl<S: Service> Service for RateLimited<S> {
    type Request = S::Request;
    type Response = S::Response;

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    async fn call(&self, req: &Self::Request) -> Result<Self::Response, BackendError> {
        self.bucket.acquire().await;
        self.inner.call(req).await
    }
}
