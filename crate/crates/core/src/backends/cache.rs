use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{BackendError, Cacheable, Keyed, Service};

/// SHA-256 over backend kind, model and the canonical request serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    let mut s = String::new();
    write_canonical(v, &mut s);
    s
}

impl CacheKey {
    pub fn from_value(kind: &str, model: &str, request: &Value) -> Self {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update([0u8]);
        h.update(model.as_bytes());
        h.update([0u8]);
        h.update(canonical_json(request).as_bytes());
        CacheKey(h.finalize().into())
    }

    pub fn for_request<R: Serialize + Keyed>(kind: &str, req: &R) -> Result<Self, serde_json::Error> {
        Ok(CacheKey::from_value(kind, req.model(), &serde_json::to_value(req)?))
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", self.hex())
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Byte store addressed by [`CacheKey`].
pub trait CacheStore: Send + Sync {
    fn get(&self, key: &CacheKey) -> io::Result<Option<Vec<u8>>>;
    fn put(&self, key: &CacheKey, body: &[u8]) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    entries: Mutex<HashMap<CacheKey, Vec<u8>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CacheStore for MemoryStore {
    fn get(&self, key: &CacheKey) -> io::Result<Option<Vec<u8>>> {
        Ok(self.entries.lock().unwrap().get(key).cloned())
    }

    fn put(&self, key: &CacheKey, body: &[u8]) -> io::Result<()> {
        self.entries.lock().unwrap().insert(*key, body.to_vec());
        Ok(())
    }
}

/// One JSON file per key at `<root>/<first two hex digits>/<digest>.json`.
/// Writes go through a temporary file and a rename, so readers never see a
/// partial body.
#[derive(Debug, Clone)]
pub struct DiskStore {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DiskStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let hex = key.hex();
        self.root.join(&hex[..2]).join(format!("{hex}.json"))
    }

    /// Number of entries and total bytes on disk.
    pub fn usage(&self) -> io::Result<(usize, u64)> {
        let mut count = 0;
        let mut bytes = 0;
        if !self.root.exists() {
            return Ok((0, 0));
        }
        for shard in std::fs::read_dir(&self.root)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for entry in std::fs::read_dir(shard.path())? {
                let entry = entry?;
                if entry.path().extension().is_some_and(|e| e == "json") {
                    count += 1;
                    bytes += entry.metadata()?.len();
                }
            }
        }
        Ok((count, bytes))
    }

    /// Removes every cached entry. Returns how many were deleted.
    pub fn clear(&self) -> io::Result<usize> {
        let (count, _) = self.usage()?;
        if self.root.exists() {
            for shard in std::fs::read_dir(&self.root)? {
                let shard = shard?;
                let name = shard.file_name();
                let name = name.to_string_lossy();
                if shard.file_type()?.is_dir() && name.len() == 2 && name.chars().all(|c| c.is_ascii_hexdigit()) {
                    std::fs::remove_dir_all(shard.path())?;
                }
            }
        }
        Ok(count)
    }
}

impl CacheStore for DiskStore {
    fn get(&self, key: &CacheKey) -> io::Result<Option<Vec<u8>>> {
        match std::fs::read(self.path_for(key)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn put(&self, key: &CacheKey, body: &[u8]) -> io::Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("sharded path has a parent");
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            key.hex(),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, &path).inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })
    }
}

#[derive(Debug, Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    store_faults: AtomicU64,
}

/// Shared view of a cache wrapper's counters.
#[derive(Debug, Clone, Default)]
pub struct CacheStats(Arc<Counters>);

impl CacheStats {
    pub fn hits(&self) -> u64 {
        self.0.hits.load(Ordering::SeqCst)
    }

    /// Requests forwarded to the inner service.
    pub fn misses(&self) -> u64 {
        self.0.misses.load(Ordering::SeqCst)
    }

    /// Store read/write faults that were degraded to misses.
    pub fn store_faults(&self) -> u64 {
        self.0.store_faults.load(Ordering::SeqCst)
    }
}

/// Read-through cache with single-flight: concurrent identical misses wait
/// for the first caller and are then served from the store. Failures are
/// never stored; store faults degrade to a miss with a warning.
pub struct Cached<S> {
    inner: S,
    store: Arc<dyn CacheStore>,
    flights: Mutex<HashMap<CacheKey, Arc<tokio::sync::Mutex<()>>>>,
    stats: CacheStats,
}

pub fn with_cache<S: Service>(inner: S, store: Arc<dyn CacheStore>) -> Cached<S> {
    Cached { inner, store, flights: Mutex::new(HashMap::new()), stats: CacheStats::default() }
}

impl<S: Service> Cached<S> {
    pub fn stats(&self) -> CacheStats {
        self.stats.clone()
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    fn lookup(&self, key: &CacheKey) -> Option<S::Response> {
        let bytes = match self.store.get(key) {
            Ok(Some(b)) => b,
            Ok(None) => return None,
            Err(e) => {
                tracing::warn!(%key, error = %e, "cache read failed, treating as miss");
                self.stats.0.store_faults.fetch_add(1, Ordering::SeqCst);
                return None;
            }
        };
        match serde_json::from_slice::<S::Response>(&bytes) {
            Ok(r) => Some(r),
            Err(e) => {
                tracing::warn!(%key, error = %e, "cache entry unreadable, treating as miss");
                self.stats.0.store_faults.fetch_add(1, Ordering::SeqCst);
                None
            }
        }
    }

    fn store(&self, key: &CacheKey, resp: &S::Response) {
        let written = serde_json::to_vec(resp)
            .map_err(io::Error::other)
            .and_then(|body| self.store.put(key, &body));
        if let Err(e) = written {
            tracing::warn!(%key, error = %e, "cache write failed");
            self.stats.0.store_faults.fetch_add(1, Ordering::SeqCst);
        }
    }

    async fn call_keyed(&self, key: CacheKey, req: &S::Request) -> Result<S::Response, BackendError> {
        if let Some(mut hit) = self.lookup(&key) {
            self.stats.0.hits.fetch_add(1, Ordering::SeqCst);
            hit.set_cache_hit(true);
            return Ok(hit);
        }
        self.stats.0.misses.fetch_add(1, Ordering::SeqCst);
        let mut resp = self.inner.call(req).await?;
        self.store(&key, &resp);
        resp.set_cache_hit(false);
        Ok(resp)
    }
}

#[async_trait]
impl<S: Service> Service for Cached<S> {
    type Request = S::Request;
    type Response = S::Response;

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    async fn call(&self, req: &Self::Request) -> Result<Self::Response, BackendError> {
        let key = match CacheKey::for_request(self.inner.kind(), req) {
            Ok(k) => k,
            Err(e) => {
                tracing::warn!(error = %e, "request not serializable, bypassing cache");
                self.stats.0.misses.fetch_add(1, Ordering::SeqCst);
                return self.inner.call(req).await;
            }
        };
        let gate = self.flights.lock().unwrap().entry(key).or_default().clone();
        let result = {
            let _turn = gate.lock().await;
            self.call_keyed(key, req).await
        };
        let mut flights = self.flights.lock().unwrap();
        // map + our clone: nobody else is queued on this key
        if Arc::strong_count(&gate) == 2 {
            flights.remove(&key);
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ChatMessage, ChatRequest, ChatResponse, ErrorClass};
    use std::sync::atomic::AtomicUsize;
    use std::time::Duration;

    struct Counting {
        calls: AtomicUsize,
        fail: bool,
    }

    #[async_trait]
    impl Service for Counting {
        type Request = ChatRequest;
        type Response = ChatResponse;

        fn kind(&self) -> &'static str {
            "llm"
        }

        async fn call(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(20)).await;
            if self.fail {
                return Err(BackendError::new(ErrorClass::ServerError, "boom"));
            }
            Ok(ChatResponse::text(format!("echo {}", req.prompt())))
        }
    }

    fn req(t: f64) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("what?")],
            temperature: t,
            max_tokens: 8,
            seed: None,
        }
    }

    struct FailingStore;

    impl CacheStore for FailingStore {
        fn get(&self, _: &CacheKey) -> io::Result<Option<Vec<u8>>> {
            Err(io::Error::other("disk on fire"))
        }
        fn put(&self, _: &CacheKey, _: &[u8]) -> io::Result<()> {
            Err(io::Error::other("disk on fire"))
        }
    }

    #[tokio::test]
    async fn sequential_identical_requests_hit() {
        let c = with_cache(Counting { calls: AtomicUsize::new(0), fail: false }, Arc::new(MemoryStore::new()));
        let a = c.call(&req(0.0)).await.unwrap();
        let b = c.call(&req(0.0)).await.unwrap();
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 1);
        assert!(!a.cache_hit && b.cache_hit);
        assert_eq!(a.text, b.text);
        assert_eq!((c.stats().hits(), c.stats().misses()), (1, 1));
    }

    #[tokio::test]
    async fn temperature_changes_key() {
        let c = with_cache(Counting { calls: AtomicUsize::new(0), fail: false }, Arc::new(MemoryStore::new()));
        c.call(&req(0.0)).await.unwrap();
        c.call(&req(0.7)).await.unwrap();
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 2);
    }

    #[tokio::test]
    async fn failures_not_cached() {
        let store = Arc::new(MemoryStore::new());
        let c = with_cache(Counting { calls: AtomicUsize::new(0), fail: true }, store.clone());
        assert!(c.call(&req(0.0)).await.is_err());
        assert!(c.call(&req(0.0)).await.is_err());
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 2);
        assert!(store.is_empty());
    }

    #[tokio::test]
    async fn store_faults_degrade_to_miss() {
        let c = with_cache(Counting { calls: AtomicUsize::new(0), fail: false }, Arc::new(FailingStore));
        let r = c.call(&req(0.0)).await.unwrap();
        assert_eq!(r.text, "echo what?");
        assert!(c.stats().store_faults() >= 2);
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn concurrent_identical_misses_single_flight() {
        let c = Arc::new(with_cache(
            Counting { calls: AtomicUsize::new(0), fail: false },
            Arc::new(MemoryStore::new()),
        ));
        let tasks: Vec<_> = (0..32).map(|_| {
            let c = c.clone();
            tokio::spawn(async move { c.call(&req(0.0)).await.unwrap().text })
        }).collect();
        let mut texts = Vec::new();
        for t in tasks {
            texts.push(t.await.unwrap());
        }
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 1);
        assert!(texts.iter().all(|t| t == &texts[0]));
        assert!(c.flights.lock().unwrap().is_empty());
    }

    #[test]
    fn disk_layout_and_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let store = DiskStore::new(tmp.path());
        let key = CacheKey::for_request("llm", &req(0.0)).unwrap();
        assert_eq!(store.get(&key).unwrap(), None);
        store.put(&key, b"{\"a\":1}").unwrap();
        let hex = key.hex();
        let expected = tmp.path().join(&hex[..2]).join(format!("{hex}.json"));
        assert!(expected.exists());
        assert_eq!(store.get(&key).unwrap().unwrap(), b"{\"a\":1}");
        assert_eq!(store.usage().unwrap().0, 1);
        assert_eq!(store.clear().unwrap(), 1);
        assert_eq!(store.get(&key).unwrap(), None);
    }

    #[test]
    fn key_ignores_field_order() {
        let a: Value = serde_json::from_str(r#"{"model":"m","temperature":0.0,"messages":[{"role":"user","content":"what?"}],"max_tokens":8,"seed":null}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"seed":null,"max_tokens":8,"messages":[{"content":"what?","role":"user"}],"temperature":0.0,"model":"m"}"#).unwrap();
        assert_eq!(CacheKey::from_value("llm", "m", &a), CacheKey::from_value("llm", "m", &b));
        let typed = CacheKey::for_request("llm", &req(0.0)).unwrap();
        assert_eq!(typed, CacheKey::from_value("llm", "m", &a));
        assert_ne!(typed, CacheKey::from_value("vision", "m", &a));
    }
}
