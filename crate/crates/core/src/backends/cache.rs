//! Content-addressed disk cache with atomic writes and per-key
//! single-flight.
//!
//! Layout: one payload file per key digest under the cache directory, plus a
//! `<key>.meta.json` sidecar recording when and for which backend the entry
//! was written. Corrupt entries degrade to a miss with a warning; they are
//! never fatal.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResponse};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheMeta {
    pub timestamp_unix_ms: u64,
    pub backend_kind: BackendKind,
    pub model_name: String,
    pub request_digest: String,
}

pub struct DiskCache {
    dir: PathBuf,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            inflight: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn payload_path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    fn meta_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.meta.json"))
    }

    fn load(&self, key: &str) -> Option<Vec<u8>> {
        let path = self.payload_path(key);
        if !path.exists() {
            return None;
        }
        match std::fs::read(&path) {
            Ok(bytes) => Some(bytes),
            Err(e) => {
                eprintln!("warning: unreadable cache entry {key}: {e}; treating as miss");
                None
            }
        }
    }

    fn store(&self, key: &str, payload: &[u8], meta: &CacheMeta) -> std::io::Result<()> {
        // temp file + rename keeps readers from ever seeing a torn entry
        let tmp = self.dir.join(format!(".tmp-{key}-{}", std::process::id()));
        std::fs::write(&tmp, payload)?;
        std::fs::rename(&tmp, self.payload_path(key))?;
        let meta_tmp = self.dir.join(format!(".tmpm-{key}-{}", std::process::id()));
        std::fs::write(&meta_tmp, serde_json::to_vec_pretty(meta)?)?;
        std::fs::rename(&meta_tmp, self.meta_path(key))?;
        Ok(())
    }

    /// Returns the cached payload byte-identically if present; otherwise
    /// invokes `call`, persists atomically, and returns the fresh payload.
    /// The boolean is `true` on a cache hit. Duplicate in-flight keys
    /// coalesce onto one live call.
    pub fn get_or_call(
        &self,
        key: &str,
        meta: &CacheMeta,
        call: impl FnOnce() -> Result<Vec<u8>, BackendError>,
    ) -> Result<(Vec<u8>, bool), BackendError> {
        if let Some(bytes) = self.load(key) {
            return Ok((bytes, true));
        }
        let lock = {
            let mut map = self.inflight.lock().expect("inflight lock");
            map.entry(key.to_string())
                .or_insert_with(|| Arc::new(Mutex::new(())))
                .clone()
        };
        let _guard = lock.lock().expect("key lock");
        // another worker may have finished while we waited
        if let Some(bytes) = self.load(key) {
            return Ok((bytes, true));
        }
        let payload = call()?;
        if let Err(e) = self.store(key, &payload, meta) {
            eprintln!("warning: failed to persist cache entry {key}: {e}");
        }
        let mut map = self.inflight.lock().expect("inflight lock");
        map.remove(key);
        Ok((payload, false))
    }
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Chat backend wrapper that serves repeated requests from the disk cache.
/// The wrapped backend's call counter only moves on cache misses.
pub struct CachedChat {
    inner: Arc<dyn ChatBackend>,
    cache: Arc<DiskCache>,
    kind: BackendKind,
}

impl CachedChat {
    pub fn new(inner: Arc<dyn ChatBackend>, cache: Arc<DiskCache>, kind: BackendKind) -> Self {
        Self { inner, cache, kind }
    }
}

impl ChatBackend for CachedChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let start = Instant::now();
        let key = request.digest(self.kind);
        let meta = CacheMeta {
            timestamp_unix_ms: now_unix_ms(),
            backend_kind: self.kind,
            model_name: request.model_name.clone(),
            request_digest: key.clone(),
        };
        let (payload, _hit) = self.cache.get_or_call(&key, &meta, || {
            let response = self.inner.chat(request)?;
            let stored = ChatResponse {
                latency_ms: 0,
                ..response
            };
            serde_json::to_vec(&stored).map_err(|e| BackendError::Malformed {
                message: format!("serialize response: {e}"),
                body: String::new(),
            })
        })?;
        let mut response: ChatResponse =
            serde_json::from_slice(&payload).map_err(|e| BackendError::Malformed {
                message: format!("corrupt cached response: {e}"),
                body: String::from_utf8_lossy(&payload).into_owned(),
            })?;
        response.latency_ms = start.elapsed().as_millis() as u64;
        Ok(response)
    }

    fn call_count(&self) -> u64 {
        self.inner.call_count()
    }
}
