//! Pluggable language-model interface used by mining, sequential retrieval,
//! and evaluation: log-probability scoring of a target given a prompt, and
//! greedy generation. Two implementations: an HTTP backend and a
//! deterministic mock.
//!
//! Scores are log-probabilities (higher is better) and must be finite and
//! <= 0. The mock's score depends only on token coverage, which makes every
//! pipeline stage reproducible in tests; its `generate` copies the answer of
//! the demonstration nearest to the query block, so retrieval quality
//! causally affects end-to-end exact match.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

use crate::bm25::tokenize;
use crate::corpus::TaskSpec;

pub const ENDPOINT_ENV: &str = "DEMO_RETRIEVE_LM_ENDPOINT";
pub const TOKEN_ENV: &str = "DEMO_RETRIEVE_LM_TOKEN";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("score target must be non-empty")]
    EmptyTarget,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend returned an invalid logprob: {0}")]
    InvalidScore(f64),
    #[error("backend unavailable after {attempts} attempts: {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("backend reply malformed after {attempts} attempts: {reason}")]
    BackendMalformedReply { attempts: u32, reason: String },
    #[error("backend timed out after {attempts} attempts ({deadline:?} each)")]
    Timeout { attempts: u32, deadline: Duration },
}

/// Arguments of one scoring call: score `target` given `prompt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmScoreRequest {
    prompt: String,
    target: String,
}

impl LmScoreRequest {
    pub fn new(prompt: impl Into<String>, target: impl Into<String>) -> Result<Self, LmError> {
        let target = target.into();
        if target.is_empty() {
            return Err(LmError::EmptyTarget);
        }
        Ok(LmScoreRequest {
            prompt: prompt.into(),
            target,
        })
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn target(&self) -> &str {
        &self.target
    }
}

/// A finite log-probability, never above 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmScore {
    logprob: f64,
}

impl LmScore {
    pub fn new(logprob: f64) -> Result<Self, LmError> {
        if !logprob.is_finite() || logprob > 0.0 {
            return Err(LmError::InvalidScore(logprob));
        }
        Ok(LmScore { logprob })
    }

    pub fn logprob(&self) -> f64 {
        self.logprob
    }
}

/// Arguments of one generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    prompt: String,
    max_tokens: usize,
    temperature: f64,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize) -> Result<Self, LmError> {
        Self::with_temperature(prompt, max_tokens, 0.0)
    }

    pub fn with_temperature(
        prompt: impl Into<String>,
        max_tokens: usize,
        temperature: f64,
    ) -> Result<Self, LmError> {
        if max_tokens == 0 {
            return Err(LmError::InvalidRequest(
                "max_tokens must be >= 1".to_string(),
            ));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(LmError::InvalidRequest(format!(
                "temperature must be a nonnegative finite real, got {temperature}"
            )));
        }
        Ok(GenRequest {
            prompt: prompt.into(),
            max_tokens,
            temperature,
        })
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// A language model backend. Shareable across worker threads; rate and
/// concurrency limiting are the implementation's responsibility.
pub trait LmClient: Send + Sync {
    fn score(&self, req: &LmScoreRequest) -> Result<LmScore, LmError>;
    fn generate(&self, req: &GenRequest) -> Result<String, LmError>;
}

/// Deterministic scoring rule of the mock backend:
/// `logprob = -(1 + m)` where `m` counts unique tokenized target terms not
/// present in the tokenized prompt. Adding a missing target term to the
/// prompt raises the score by exactly 1.
pub fn mock_score(prompt: &str, target: &str) -> LmScore {
    let prompt_terms: std::collections::HashSet<String> = tokenize(prompt).into_iter().collect();
    let target_terms: std::collections::HashSet<String> = tokenize(target).into_iter().collect();
    let missing = target_terms
        .iter()
        .filter(|t| !prompt_terms.contains(*t))
        .count();
    LmScore {
        logprob: -(1.0 + missing as f64),
    }
}

/// Deterministic stand-in for a real LLM. Needs the task spec to recognize
/// demonstration blocks inside prompts.
#[derive(Debug, Clone)]
pub struct MockLm {
    task: TaskSpec,
}

impl MockLm {
    pub fn new(task: TaskSpec) -> Self {
        MockLm { task }
    }
}

impl LmClient for MockLm {
    fn score(&self, req: &LmScoreRequest) -> Result<LmScore, LmError> {
        Ok(mock_score(&req.prompt, &req.target))
    }

    /// Copy the answer of the demonstration whose linearized text appears
    /// last in the prompt (the block adjacent to the open query block), or
    /// empty text for zero-shot prompts. Output is truncated to
    /// `max_tokens` whitespace tokens.
    fn generate(&self, req: &GenRequest) -> Result<String, LmError> {
        let blocks: Vec<&str> = req.prompt.split(&self.task.demo_separator).collect();
        if blocks.len() < 2 {
            return Ok(String::new());
        }
        let nearest_demo = blocks[blocks.len() - 2];
        let answer = match nearest_demo.rfind(&self.task.answer_prefix) {
            Some(at) => &nearest_demo[at + self.task.answer_prefix.len()..],
            None => return Ok(String::new()),
        };
        let truncated: Vec<&str> = answer
            .split_whitespace()
            .take(req.max_tokens)
            .collect();
        Ok(truncated.join(" "))
    }
}

/// Counting semaphore bounding in-flight HTTP requests.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.sem.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.sem.cv.notify_one();
    }
}

/// HTTP backend settings. The wire contract is `POST {base}/score` with
/// fields `prompt`/`target` returning `{"logprob": <finite number <= 0>}`,
/// and `POST {base}/generate` with `prompt`/`max_tokens`/`temperature`
/// returning `{"text": <string>}`.
#[derive(Debug, Clone)]
pub struct HttpLmConfig {
    pub base_url: String,
    pub bearer_token: Option<String>,
    /// Per-request deadline.
    pub timeout: Duration,
    /// Total attempts per call, including the first.
    pub max_attempts: u32,
    /// First backoff pause; doubles per retry.
    pub backoff_base: Duration,
    /// Maximum in-flight requests.
    pub concurrency: usize,
}

impl HttpLmConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpLmConfig {
            base_url: base_url.into(),
            bearer_token: std::env::var(TOKEN_ENV).ok(),
            timeout: Duration::from_secs(30),
            max_attempts: 3,
            backoff_base: Duration::from_millis(250),
            concurrency: 8,
        }
    }

    /// Read the endpoint from `DEMO_RETRIEVE_LM_ENDPOINT`.
    pub fn from_env() -> Option<Self> {
        std::env::var(ENDPOINT_ENV).ok().map(Self::new)
    }
}

/// HTTP language-model client with bounded retries, a per-request deadline,
/// and a concurrency cap.
pub struct HttpLm {
    cfg: HttpLmConfig,
    client: reqwest::blocking::Client,
    semaphore: Semaphore,
}

impl HttpLm {
    pub fn new(cfg: HttpLmConfig) -> Result<Self, LmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| LmError::BackendUnavailable {
                attempts: 0,
                reason: format!("client construction failed: {e}"),
            })?;
        let semaphore = Semaphore::new(cfg.concurrency.max(1));
        Ok(HttpLm {
            cfg,
            client,
            semaphore,
        })
    }

    fn post(&self, endpoint: &str, body: serde_json::Value) -> Result<serde_json::Value, LmError> {
        let url = format!("{}/{endpoint}", self.cfg.base_url.trim_end_matches('/'));
        let mut last_err: Option<LmError> = None;
        for attempt in 1..=self.cfg.max_attempts {
            if attempt > 1 {
                let pause = self.cfg.backoff_base * 2u32.pow(attempt - 2);
                std::thread::sleep(pause);
            }
            let _permit = self.semaphore.acquire();
            let mut request = self.client.post(&url).json(&body);
            if let Some(token) = &self.cfg.bearer_token {
                request = request.bearer_auth(token);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if !status.is_success() {
                        last_err = Some(LmError::BackendMalformedReply {
                            attempts: attempt,
                            reason: format!("status {status}"),
                        });
                        continue;
                    }
                    match response.json::<serde_json::Value>() {
                        Ok(value) => return Ok(value),
                        Err(e) => {
                            last_err = Some(LmError::BackendMalformedReply {
                                attempts: attempt,
                                reason: format!("invalid JSON body: {e}"),
                            });
                        }
                    }
                }
                Err(e) if e.is_timeout() => {
                    last_err = Some(LmError::Timeout {
                        attempts: attempt,
                        deadline: self.cfg.timeout,
                    });
                }
                Err(e) => {
                    last_err = Some(LmError::BackendUnavailable {
                        attempts: attempt,
                        reason: e.to_string(),
                    });
                }
            }
        }
        Err(last_err.unwrap_or(LmError::BackendUnavailable {
            attempts: self.cfg.max_attempts,
            reason: "no attempts made".to_string(),
        }))
    }
}

impl LmClient for HttpLm {
    fn score(&self, req: &LmScoreRequest) -> Result<LmScore, LmError> {
        let reply = self.post(
            "score",
            json!({ "prompt": req.prompt, "target": req.target }),
        )?;
        let logprob = reply
            .get("logprob")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| LmError::BackendMalformedReply {
                attempts: self.cfg.max_attempts,
                reason: "missing numeric field `logprob`".to_string(),
            })?;
        LmScore::new(logprob).map_err(|_| LmError::BackendMalformedReply {
            attempts: self.cfg.max_attempts,
            reason: format!("logprob {logprob} is not a finite value <= 0"),
        })
    }

    fn generate(&self, req: &GenRequest) -> Result<String, LmError> {
        let reply = self.post(
            "generate",
            json!({
                "prompt": req.prompt,
                "max_tokens": req.max_tokens,
                "temperature": req.temperature,
            }),
        )?;
        let text = reply
            .get("text")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| LmError::BackendMalformedReply {
                attempts: self.cfg.max_attempts,
                reason: "missing string field `text`".to_string(),
            })?;
        let truncated: Vec<&str> = text.split_whitespace().take(req.max_tokens).collect();
        Ok(truncated.join(" "))
    }
}
