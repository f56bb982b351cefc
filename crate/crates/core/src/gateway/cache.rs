//! Record/replay cache wrapper: one file per entry, keyed by the digest
//! over every request field, holding request and response verbatim.

use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Call through and persist every response.
    Record,
    /// Serve only from the store; never touch the inner backend.
    Replay,
    /// Ignore the store entirely.
    Passthrough,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: ChatRequest,
    response: ChatResponse,
}

/// Wraps any backend with persistent record/replay behavior.
pub struct RecordReplayBackend {
    inner: Option<std::sync::Arc<dyn ChatBackend>>,
    mode: CacheMode,
    dir: PathBuf,
    // Serializes writes so concurrent recorders cannot interleave temp renames.
    write_lock: Mutex<()>,
}

impl RecordReplayBackend {
    pub fn new(
        inner: Option<std::sync::Arc<dyn ChatBackend>>,
        mode: CacheMode,
        dir: impl Into<PathBuf>,
    ) -> Result<Self, GatewayError> {
        let dir = dir.into();
        if mode == CacheMode::Record {
            std::fs::create_dir_all(&dir)
                .map_err(|e| GatewayError::CacheIo(format!("create {}: {e}", dir.display())))?;
        }
        if mode != CacheMode::Replay && inner.is_none() {
            return Err(GatewayError::CacheIo(
                "record/passthrough modes require an inner backend".into(),
            ));
        }
        Ok(Self { inner, mode, dir, write_lock: Mutex::new(()) })
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    fn load(&self, digest: &str) -> Result<Option<ChatResponse>, GatewayError> {
        let path = self.entry_path(digest);
        match std::fs::read_to_string(&path) {
            Ok(raw) => {
                let entry: CacheEntry = serde_json::from_str(&raw).map_err(|e| {
                    GatewayError::CacheIo(format!("corrupt entry {}: {e}", path.display()))
                })?;
                Ok(Some(entry.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::CacheIo(format!("read {}: {e}", path.display()))),
        }
    }

    fn store(&self, digest: &str, entry: &CacheEntry) -> Result<(), GatewayError> {
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        let path = self.entry_path(digest);
        let tmp = self.dir.join(format!(".{digest}.tmp"));
        let body = serde_json::to_vec_pretty(entry)
            .map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        std::fs::write(&tmp, body)
            .map_err(|e| GatewayError::CacheIo(format!("write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| GatewayError::CacheIo(format!("rename {}: {e}", path.display())))?;
        Ok(())
    }
}

impl ChatBackend for RecordReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = request.digest();
        match self.mode {
            CacheMode::Passthrough => {
                self.inner.as_ref().expect("checked at construction").complete(request)
            }
            CacheMode::Replay => match self.load(&digest)? {
                Some(mut response) => {
                    response.cached = true;
                    Ok(response)
                }
                None => Err(GatewayError::ReplayMiss(digest)),
            },
            CacheMode::Record => {
                if let Some(mut hit) = self.load(&digest)? {
                    hit.cached = true;
                    return Ok(hit);
                }
                let response = self
                    .inner
                    .as_ref()
                    .expect("checked at construction")
                    .complete(request)?;
                self.store(&digest, &CacheEntry { request: request.clone(), response: response.clone() })?;
                Ok(response)
            }
        }
    }

    fn id(&self) -> String {
        match self.mode {
            CacheMode::Record => "record".into(),
            CacheMode::Replay => "replay".into(),
            CacheMode::Passthrough => {
                self.inner.as_ref().map(|b| b.id()).unwrap_or_else(|| "passthrough".into())
            }
        }
    }
}
