use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;

use super::{BackendError, Service};

#[derive(Debug, Default)]
struct Gauges {
    calls: AtomicU64,
    failures: AtomicU64,
    in_flight: AtomicU64,
    peak_in_flight: AtomicU64,
}

/// Cloneable handle onto a [`Metered`] wrapper's counters.
#[derive(Debug, Clone, Default)]
pub struct MeterHandle(Arc<Gauges>);

impl MeterHandle {
    pub fn calls(&self) -> u64 {
        self.0.calls.load(Ordering::SeqCst)
    }

    pub fn failures(&self) -> u64 {
        self.0.failures.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously outstanding calls observed.
    pub fn peak_in_flight(&self) -> u64 {
        self.0.peak_in_flight.load(Ordering::SeqCst)
    }
}

/// Counts calls and tracks concurrency on the way to the inner service.
pub struct Metered<S> {
    inner: S,
    handle: MeterHandle,
}

impl<S> Metered<S> {
    pub fn new(inner: S) -> Self {
        Metered { inner, handle: MeterHandle::default() }
    }

    pub fn handle(&self) -> MeterHandle {
        self.handle.clone()
    }
}

struct InFlight<'a>(&'a Gauges);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl<S: Service> Service for Metered<S> {
    type Request = S::Request;
    type Response = S::Response;

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    async fn call(&self, req: &Self::Request) -> Result<Self::Response, BackendError> {
        let g = &*self.handle.0;
        g.calls.fetch_add(1, Ordering::SeqCst);
        let now = g.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        g.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlight(g);
        let out = self.inner.call(req).await;
        if out.is_err() {
            g.failures.fetch_add(1, Ordering::SeqCst);
        }
        out
    }
}
