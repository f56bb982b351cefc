//! Deterministic scripted backend: a priority-ordered rule table mapping
//! request predicates to canned or computed responses. The test double for
//! everything that would otherwise need a live model.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage};

/// Request predicate for a scripted rule.
pub enum Matcher {
    /// Substring match over system and user text concatenated.
    Substring(String),
    /// Arbitrary predicate.
    Predicate(Box<dyn Fn(&ChatRequest) -> bool + Send + Sync>),
    /// Matches everything; every script needs one as its final rule.
    Always,
}

impl Matcher {
    fn matches(&self, request: &ChatRequest) -> bool {
        match self {
            Matcher::Substring(needle) => {
                request.system_text.contains(needle) || request.user_text.contains(needle)
            }
            Matcher::Predicate(p) => p(request),
            Matcher::Always => true,
        }
    }
}

/// Response side of a rule: fixed text or a pure function of the request.
pub enum Responder {
    Text(String),
    Func(Arc<dyn Fn(&ChatRequest) -> String + Send + Sync>),
}

impl Responder {
    fn respond(&self, request: &ChatRequest) -> String {
        match self {
            Responder::Text(text) => text.clone(),
            Responder::Func(f) => f(request),
        }
    }
}

/// One scripted rule. Lower priority values fire first; exactly one rule
/// answers any request.
pub struct ScriptedRule {
    pub name: String,
    pub priority: i32,
    pub matcher: Matcher,
    pub response: Responder,
}

impl ScriptedRule {
    pub fn text(name: &str, priority: i32, matcher: Matcher, response: &str) -> Self {
        Self {
            name: name.into(),
            priority,
            matcher,
            response: Responder::Text(response.into()),
        }
    }

    pub fn func(
        name: &str,
        priority: i32,
        matcher: Matcher,
        response: impl Fn(&ChatRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            priority,
            matcher,
            response: Responder::Func(Arc::new(response)),
        }
    }
}

/// Rule-table backend. A pure function of the request as long as every
/// responder is pure, so identical requests yield identical responses
/// across processes.
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(mut rules: Vec<ScriptedRule>) -> Self {
        rules.sort_by_key(|rule| rule.priority);
        Self { rules, calls: AtomicU64::new(0) }
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let rule = self
            .rules
            .iter()
            .find(|rule| rule.matcher.matches(request))
            .ok_or(GatewayError::ScriptMiss)?;
        let text = rule.response.respond(request);
        let prompt_chars = request.system_text.len() + request.user_text.len();
        Ok(ChatResponse {
            text,
            usage: Usage {
                prompt_tokens: (prompt_chars / 4) as u64,
                completion_tokens: 16,
            },
            backend_id: format!("scripted:{}", rule.name),
            cached: false,
        })
    }

    fn id(&self) -> String {
        "scripted".into()
    }
}
