//! Model gateway: one handle over the four model roles (LLM, VLM, embedder,
//! reranker).
//!
//! Backends implement [`ModelBackend`]; [`ModelGateway`] wraps one with the
//! retry policy and token accounting. Two backends ship with the crate: the
//! deterministic [`MockBackend`] and the HTTP [`HttpBackend`].

mod http;
mod mock;
pub mod prompts;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::{HttpBackend, HttpConfig};
pub use mock::{jaccard, MockBackend, RerankFn};
pub use prompts::{Prompt, PromptTemplate};

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct BackendError {
    pub message: String,
    pub retryable: bool,
    pub timeout: bool,
}

impl BackendError {
    pub fn fatal(message: impl Into<String>) -> Self {
        BackendError {
            message: message.into(),
            retryable: false,
            timeout: false,
        }
    }

    pub fn transient(message: impl Into<String>) -> Self {
        BackendError {
            message: message.into(),
            retryable: true,
            timeout: false,
        }
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Transport for the four model roles. Implementations must be pure for a
/// fixed input if they are to be used in reproducible runs.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Embedding dimension; constant for the lifetime of the backend.
    fn dimension(&self) -> usize;

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError>;

    fn complete_vision(&self, prompt: &Prompt, image: &[u8]) -> Result<Completion, BackendError>;

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;

    /// One score per candidate, in input order.
    fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    llm_calls: AtomicU64,
    vlm_calls: AtomicU64,
    embed_calls: AtomicU64,
    rerank_calls: AtomicU64,
}

/// Snapshot of the gateway's accounting counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub llm_calls: u64,
    pub vlm_calls: u64,
    pub embed_calls: u64,
    pub rerank_calls: u64,
}

impl Usage {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens - earlier.prompt_tokens,
            completion_tokens: self.completion_tokens - earlier.completion_tokens,
            llm_calls: self.llm_calls - earlier.llm_calls,
            vlm_calls: self.vlm_calls - earlier.vlm_calls,
            embed_calls: self.embed_calls - earlier.embed_calls,
            rerank_calls: self.rerank_calls - earlier.rerank_calls,
        }
    }
}

/// Cheaply cloneable; clones share the backend and the counters.
#[derive(Clone)]
pub struct ModelGateway {
    backend: Arc<dyn ModelBackend>,
    retry: RetryPolicy,
    counters: Arc<Counters>,
}

impl fmt::Debug for ModelGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelGateway")
            .field("backend", &self.backend.name())
            .field("retry", &self.retry)
            .finish()
    }
}

impl ModelGateway {
    pub fn new(backend: impl ModelBackend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn ModelBackend>) -> Self {
        ModelGateway {
            backend,
            retry: RetryPolicy::default(),
            counters: Arc::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Same backend and retry policy, fresh counters.
    pub fn detached(&self) -> Self {
        ModelGateway {
            backend: Arc::clone(&self.backend),
            retry: self.retry,
            counters: Arc::default(),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn dimension(&self) -> usize {
        self.backend.dimension()
    }

    pub fn usage(&self) -> Usage {
        let c = &self.counters;
        Usage {
            prompt_tokens: c.prompt_tokens.load(Ordering::SeqCst),
            completion_tokens: c.completion_tokens.load(Ordering::SeqCst),
            llm_calls: c.llm_calls.load(Ordering::SeqCst),
            vlm_calls: c.vlm_calls.load(Ordering::SeqCst),
            embed_calls: c.embed_calls.load(Ordering::SeqCst),
            rerank_calls: c.rerank_calls.load(Ordering::SeqCst),
        }
    }

    fn with_retries<T>(
        &self,
        what: &str,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T> {
        let attempts = self.retry.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    let retry = e.retryable && attempt + 1 < attempts;
                    log::debug!("{what} attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    if !retry {
                        break;
                    }
                    thread::sleep(self.retry.base_delay * 2u32.pow(attempt));
                }
            }
        }
        let e = last.expect("at least one attempt");
        if e.timeout {
            Err(Error::Timeout(format!("{what}: {}", e.message)))
        } else {
            Err(Error::Gateway(format!("{what}: {}", e.message)))
        }
    }

    fn account(&self, c: &Completion) {
        self.counters
            .prompt_tokens
            .fetch_add(c.prompt_tokens, Ordering::SeqCst);
        self.counters
            .completion_tokens
            .fetch_add(c.completion_tokens, Ordering::SeqCst);
    }

    pub fn complete(&self, prompt: &Prompt) -> Result<String> {
        if prompt.text.trim().is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        self.counters.llm_calls.fetch_add(1, Ordering::SeqCst);
        let c = self.with_retries(&format!("llm[{}]", prompt.template), || {
            self.backend.complete(prompt)
        })?;
        self.account(&c);
        Ok(c.text)
    }

    pub fn complete_vision(&self, prompt: &Prompt, image: &[u8]) -> Result<String> {
        if prompt.text.trim().is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        if image.is_empty() {
            return Err(Error::InvalidInput("empty image".into()));
        }
        self.counters.vlm_calls.fetch_add(1, Ordering::SeqCst);
        let c = self.with_retries(&format!("vlm[{}]", prompt.template), || {
            self.backend.complete_vision(prompt, image)
        })?;
        self.account(&c);
        Ok(c.text)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("cannot embed empty text".into()));
        }
        self.counters.embed_calls.fetch_add(1, Ordering::SeqCst);
        let v = self.with_retries("embed", || self.backend.embed(text))?;
        let d = self.dimension();
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: v.len(),
            });
        }
        Ok(v)
    }

    pub fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("rerank needs at least one candidate".into()));
        }
        self.counters.rerank_calls.fetch_add(1, Ordering::SeqCst);
        let scores = self.with_retries("rerank", || self.backend.rerank(query, candidates))?;
        if scores.len() != candidates.len() {
            return Err(Error::Gateway(format!(
                "rerank returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }
        Ok(scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::prompts::CLASSIFY;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        failures_left: AtomicU32,
    }

    impl ModelBackend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn dimension(&self) -> usize {
            2
        }
        fn complete(&self, _: &Prompt) -> Result<Completion, BackendError> {
            if self.failures_left.load(Ordering::SeqCst) > 0 {
                self.failures_left.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::transient("503"));
            }
            Ok(Completion {
                text: "ok".into(),
                prompt_tokens: 3,
                completion_tokens: 1,
            })
        }
        fn complete_vision(&self, p: &Prompt, _: &[u8]) -> Result<Completion, BackendError> {
            self.complete(p)
        }
        fn embed(&self, _: &str) -> Result<Vec<f32>, BackendError> {
            Ok(vec![1.0, 0.0, 0.0])
        }
        fn rerank(&self, _: &str, c: &[String]) -> Result<Vec<f64>, BackendError> {
            Ok(vec![0.5; c.len()])
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    #[test]
    fn transient_failures_are_retried() {
        let gw = ModelGateway::new(Flaky {
            failures_left: AtomicU32::new(2),
        })
        .with_retry(fast());
        let p = CLASSIFY.render(&[("query", "q")]).unwrap();
        assert_eq!(gw.complete(&p).unwrap(), "ok");

        let gw = ModelGateway::new(Flaky {
            failures_left: AtomicU32::new(3),
        })
        .with_retry(fast());
        assert!(matches!(gw.complete(&p), Err(Error::Gateway(_))));
    }

    #[test]
    fn counters_grow_monotonically() {
        let gw = ModelGateway::new(Flaky {
            failures_left: AtomicU32::new(0),
        });
        let p = CLASSIFY.render(&[("query", "q")]).unwrap();
        let mut last = gw.usage();
        for _ in 0..3 {
            gw.complete(&p).unwrap();
            let now = gw.usage();
            assert!(now.tokens() > last.tokens());
            assert_eq!(now.since(&last).llm_calls, 1);
            last = now;
        }
    }

    #[test]
    fn embedding_dimension_is_enforced() {
        let gw = ModelGateway::new(Flaky {
            failures_left: AtomicU32::new(0),
        });
        assert!(matches!(
            gw.embed("x"),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 3
            })
        ));
        assert!(matches!(gw.embed("  "), Err(Error::InvalidInput(_))));
        assert!(matches!(gw.rerank("q", &[]), Err(Error::InvalidInput(_))));
    }
}
