//! Uniform access to chat-completion models: a remote HTTP backend, a
//! deterministic scripted backend for tests, and a record/replay cache,
//! all behind one retrying, parallelism-capped gateway.

mod cache;
mod http;
mod scripted;

pub use cache::{CacheMode, RecordReplayBackend};
pub use http::HttpBackend;
pub use scripted::{Matcher, Responder, ScriptedBackend, ScriptedRule};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Desired shape of the model response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseFormat {
    FreeText,
    StructuredDocument,
}

/// One chat-completion request. The digest over every field keys the
/// record/replay cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response_format: ResponseFormat,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            model_name: String::new(),
            temperature: 0.0,
            max_tokens: 1024,
            response_format: ResponseFormat::FreeText,
        }
    }

    /// Content digest over all request fields.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub backend_id: String,
    pub cached: bool,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("authentication rejected: {0}")]
    AuthRejected(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("no scripted rule matched the request (missing catch-all)")]
    ScriptMiss,
    #[error("replay cache has no entry for digest {0}")]
    ReplayMiss(String),
    #[error("empty response from backend")]
    EmptyResponse,
    #[error("structured response still malformed after {retries} re-asks")]
    MalformedAfterRetries { retries: u32, raw_attempts: Vec<String> },
    #[error("cache io error: {0}")]
    CacheIo(String),
}

impl GatewayError {
    /// Whether another attempt could plausibly succeed.
    fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport { .. }
                | GatewayError::RateLimited { .. }
                | GatewayError::EmptyResponse
        )
    }

    /// Configuration-class failures: retrying other articles cannot help,
    /// so callers should abort instead of tolerating them per-record.
    pub fn is_fatal_config(&self) -> bool {
        matches!(
            self,
            GatewayError::AuthRejected(_)
                | GatewayError::ScriptMiss
                | GatewayError::ReplayMiss(_)
                | GatewayError::CacheIo(_)
        )
    }
}

/// A chat-completion provider. Implementations must be shareable across
/// threads; the gateway adds retry and the global in-flight cap on top.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
    fn id(&self) -> String;
}

/// Counting semaphore; stdlib has no stable one.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), available: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }

    fn release(&self) {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.available.notify_one();
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        self.semaphore.release();
    }
}

/// Retry policy for the gateway. A zero base delay disables backoff
/// sleeps, which keeps scripted test runs instant.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

/// The shared entry point for every model call. Enforces the global
/// in-flight cap, retries retryable failures with exponential backoff,
/// and layers structured-output parsing over `complete`.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limiter: Semaphore,
    retry: RetryPolicy,
    structured_retries: u32,
    calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, parallelism: usize, retry: RetryPolicy) -> Self {
        Self {
            backend,
            limiter: Semaphore::new(parallelism.max(1)),
            retry,
            structured_retries: 2,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_structured_retries(mut self, retries: u32) -> Self {
        self.structured_retries = retries;
        self
    }

    /// Total completed `complete` invocations (successful or not).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// One completion with retry. At most one response is ever returned;
    /// the in-flight cap is held across attempts.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let _permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.backend.complete(request) {
                Ok(response) => {
                    if response.text.trim().is_empty() {
                        if attempt >= self.retry.max_attempts {
                            return Err(GatewayError::EmptyResponse);
                        }
                    } else {
                        return Ok(response);
                    }
                }
                Err(err) => {
                    if !err.is_retryable() || attempt >= self.retry.max_attempts {
                        return Err(match err {
                            GatewayError::Transport { detail, .. } => {
                                GatewayError::Transport { attempts: attempt, detail }
                            }
                            GatewayError::RateLimited { .. } => {
                                GatewayError::RateLimited { attempts: attempt }
                            }
                            other => other,
                        });
                    }
                }
            }
            if !self.retry.base_delay.is_zero() {
                let backoff = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
                std::thread::sleep(backoff);
            }
        }
    }

    /// Completion that must contain a structured document with the given
    /// fields. Malformed output is re-asked up to the configured budget
    /// with a corrective suffix appended.
    pub fn complete_structured(
        &self,
        request: &ChatRequest,
        required_fields: &[&str],
    ) -> Result<serde_json::Value, GatewayError> {
        debug_assert_eq!(request.response_format, ResponseFormat::StructuredDocument);
        let mut raw_attempts = Vec::new();
        let mut current = request.clone();
        for round in 0..=self.structured_retries {
            // An empty reply is just another malformed attempt; the
            // corrective re-ask may still recover it.
            let text = match self.complete(&current) {
                Ok(response) => response.text,
                Err(GatewayError::EmptyResponse) => String::new(),
                Err(other) => return Err(other),
            };
            match extract_document(&text, required_fields) {
                Some(document) => return Ok(document),
                None => {
                    raw_attempts.push(text);
                    if round < self.structured_retries {
                        current = request.clone();
                        current.user_text = format!(
                            "{}\n\nYour previous reply could not be parsed. Respond again with \
                             only a single JSON object containing the fields {}.",
                            request.user_text,
                            required_fields.join(", "),
                        );
                    }
                }
            }
        }
        Err(GatewayError::MalformedAfterRetries {
            retries: self.structured_retries,
            raw_attempts,
        })
    }
}

/// Finds the first well-formed JSON object embedded in free text that
/// carries every required field.
pub fn extract_document(text: &str, required_fields: &[&str]) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    let candidate = &text[start.unwrap()..=i];
                    if let Ok(value) = serde_json::from_str::<serde_json::Value>(candidate) {
                        if value.is_object()
                            && required_fields.iter().all(|f| value.get(f).is_some())
                        {
                            return Some(value);
                        }
                    }
                    start = None;
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicI64, AtomicU32};

    /// Scripted stand-in that fails a fixed number of times first.
    struct FlakyBackend {
        failures_before_success: u32,
        seen: AtomicU32,
    }

    impl ChatBackend for FlakyBackend {
        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.failures_before_success {
                Err(GatewayError::Transport { attempts: 1, detail: "injected".into() })
            } else {
                Ok(ChatResponse {
                    text: "ok".into(),
                    usage: Usage::default(),
                    backend_id: "flaky".into(),
                    cached: false,
                })
            }
        }

        fn id(&self) -> String {
            "flaky".into()
        }
    }

    /// Tracks concurrent entries to verify the in-flight cap.
    struct ProbeBackend {
        in_flight: AtomicI64,
        max_seen: AtomicI64,
    }

    impl ChatBackend for ProbeBackend {
        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.max_seen.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(3));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatResponse {
                text: "probe".into(),
                usage: Usage::default(),
                backend_id: "probe".into(),
                cached: false,
            })
        }

        fn id(&self) -> String {
            "probe".into()
        }
    }

    fn no_delay(max_attempts: u32) -> RetryPolicy {
        RetryPolicy { max_attempts, base_delay: Duration::ZERO }
    }

    #[test]
    fn two_transient_failures_then_success() {
        let backend =
            Arc::new(FlakyBackend { failures_before_success: 2, seen: AtomicU32::new(0) });
        let gateway = Gateway::new(backend.clone(), 1, no_delay(3));
        let response = gateway.complete(&ChatRequest::new("s", "u")).unwrap();
        assert_eq!(response.text, "ok");
        assert_eq!(backend.seen.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_exhausted_reports_attempts() {
        let backend =
            Arc::new(FlakyBackend { failures_before_success: 10, seen: AtomicU32::new(0) });
        let gateway = Gateway::new(backend, 1, no_delay(3));
        match gateway.complete(&ChatRequest::new("s", "u")) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected Transport, got {other:?}"),
        }
    }

    #[test]
    fn at_most_one_response_per_call() {
        let backend =
            Arc::new(FlakyBackend { failures_before_success: 1, seen: AtomicU32::new(0) });
        let gateway = Gateway::new(backend, 1, no_delay(5));
        // A single logical call, even with internal retries, yields one response.
        let response = gateway.complete(&ChatRequest::new("s", "u")).unwrap();
        assert_eq!(response.text, "ok");
        assert_eq!(gateway.call_count(), 1);
    }

    #[test]
    fn in_flight_never_exceeds_cap() {
        let backend = Arc::new(ProbeBackend {
            in_flight: AtomicI64::new(0),
            max_seen: AtomicI64::new(0),
        });
        let gateway = Arc::new(Gateway::new(backend.clone(), 3, no_delay(1)));
        std::thread::scope(|scope| {
            for _ in 0..16 {
                let gateway = Arc::clone(&gateway);
                scope.spawn(move || {
                    gateway.complete(&ChatRequest::new("s", "u")).unwrap();
                });
            }
        });
        let max = backend.max_seen.load(Ordering::SeqCst);
        assert!(max <= 3, "saw {max} concurrent requests with cap 3");
        assert!(max >= 2, "probe never overlapped; test is not exercising concurrency");
    }

    #[test]
    fn extract_document_plain_and_wrapped() {
        let required = ["score", "injection_detected"];
        let plain = r#"{"score": 7, "injection_detected": false}"#;
        assert!(extract_document(plain, &required).is_some());

        let wrapped = "Sure! Here is the grading outcome you asked for:\n```json\n{\"score\": 3, \"injection_detected\": true}\n```\nLet me know if you need anything else.";
        let doc = extract_document(wrapped, &required).unwrap();
        assert_eq!(doc["score"], 3);

        // A preceding object without the fields is skipped.
        let two = r#"{"note": "x"} then {"score": 1, "injection_detected": false}"#;
        let doc = extract_document(two, &required).unwrap();
        assert_eq!(doc["score"], 1);

        assert!(extract_document("no json here", &required).is_none());
        assert!(extract_document(r#"{"score": 5}"#, &required).is_none());
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_extraction() {
        let required = ["score"];
        let tricky = r#"{"comment": "weird { and } inside", "score": 9}"#;
        let doc = extract_document(tricky, &required).unwrap();
        assert_eq!(doc["score"], 9);
    }
}
