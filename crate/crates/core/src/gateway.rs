//! Candidate generation through a chat-completions endpoint.
//!
//! Nothing downstream depends on this module: every other stage reads
//! candidate files, which may just as well be produced offline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::parse::{parse_candidate, ThinkDelimiters};
use crate::types::{CandidateKind, CandidateRecord, Task};

pub const PROBLEM_PLACEHOLDER: &str = "{{problem}}";

const CODE_TEMPLATE: &str = include_str!("../templates/code_prompt.txt");
const TEST_TEMPLATE: &str = include_str!("../templates/test_prompt.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if !text.contains(PROBLEM_PLACEHOLDER) {
            return Err(Error::Prompt(format!("template lacks the {PROBLEM_PLACEHOLDER} placeholder")));
        }
        Ok(Self { text })
    }

    pub fn code() -> Self {
        Self {
            text: CODE_TEMPLATE.to_string(),
        }
    }

    pub fn test() -> Self {
        Self {
            text: TEST_TEMPLATE.to_string(),
        }
    }

    pub fn for_kind(kind: CandidateKind) -> Self {
        match kind {
            CandidateKind::Code => Self::code(),
            CandidateKind::Test => Self::test(),
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::new(std::fs::read_to_string(path)?)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, task: &Task) -> Result<String> {
        if task.description.trim().is_empty() {
            return Err(Error::Prompt(format!("task {} has an empty description", task.id)));
        }
        Ok(self.text.replace(PROBLEM_PLACEHOLDER, &task.description))
    }
}

pub fn render_code_prompt(task: &Task) -> Result<String> {
    PromptTemplate::code().render(task)
}

pub fn render_test_prompt(task: &Task) -> Result<String> {
    PromptTemplate::test().render(task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: Option<u32>,
    pub num_samples: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: None,
            num_samples: 16,
        }
    }
}

impl SamplingConfig {
    /// Defaults for long reasoning models: a lower temperature.
    pub fn long_cot() -> Self {
        Self {
            temperature: 0.8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidArgument("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument("top_p must lie in (0, 1]".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::InvalidArgument("num_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// Endpoint root, e.g. `https://api.example.com/v1`.
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the API key. Empty means no auth header.
    pub api_key_env: String,
    pub request_timeout_ms: u64,
    pub max_retries: u32,
    pub concurrent_request_limit: usize,
    /// First backoff delay; doubles per retry, plus up to the same amount of jitter.
    pub backoff_base_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: String::new(),
            api_key_env: "OPENAI_API_KEY".into(),
            request_timeout_ms: 600_000,
            max_retries: 3,
            concurrent_request_limit: 8,
            backoff_base_ms: 500,
        }
    }
}

/// One completion from a provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Provider-reported completion token count.
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Worth retrying: transport errors, rate limits, server errors.
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication: {0}")]
    Auth(String),
    /// Not worth retrying.
    #[error("{0}")]
    Fatal(String),
}

pub trait ChatProvider: Sync {
    fn complete(&self, prompt: &str, sampling: &SamplingConfig) -> Result<Completion, ProviderError>;
}

/// Blocking client for the chat-completions wire format. The rendered prompt
/// is sent as a single user message.
pub struct HttpChatProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatProvider {
    pub fn new(config: &ProviderConfig) -> Result<Self> {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                Error::Auth(format!("environment variable {} is not set", config.api_key_env))
            })?)
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.request_timeout_ms))
            .build()
            .map_err(|e| Error::Gateway {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model_name.clone(),
            api_key,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, prompt: &str, sampling: &SamplingConfig) -> Result<Completion, ProviderError> {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "n": 1,
        });
        if let Some(max) = sampling.max_tokens {
            body["max_tokens"] = json!(max);
        }
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(ProviderError::Auth(format!("HTTP {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderError::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| ProviderError::Fatal(format!("malformed response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Fatal("response has no message content".into()))?;
        Ok(Completion {
            text,
            completion_tokens: parsed.usage.and_then(|u| u.completion_tokens),
        })
    }
}

/// Delay before retry number `retry` (0-based): exponential with jitter.
fn backoff_delay(base_ms: u64, retry: u32) -> Duration {
    let exp = base_ms.saturating_mul(1u64 << retry.min(16));
    let jitter = if exp == 0 { 0 } else { rand::rng().random_range(0..=exp) };
    Duration::from_millis(exp + jitter)
}

/// Calls the provider, retrying transient failures up to `max_retries` times.
pub fn complete_with_retries<P: ChatProvider + ?Sized>(
    provider: &P,
    prompt: &str,
    sampling: &SamplingConfig,
    config: &ProviderConfig,
) -> Result<Completion> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match provider.complete(prompt, sampling) {
            Ok(c) => return Ok(c),
            Err(ProviderError::Auth(msg)) => return Err(Error::Auth(msg)),
            Err(ProviderError::Fatal(message)) => return Err(Error::Gateway { attempts, message }),
            Err(ProviderError::Transient(message)) => {
                if attempts > config.max_retries {
                    return Err(Error::Gateway { attempts, message });
                }
                log::debug!("transient provider failure (attempt {attempts}): {message}");
                thread::sleep(backoff_delay(config.backoff_base_ms, attempts - 1));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationOutcome {
    /// Successful candidates, ordered by index.
    pub records: Vec<CandidateRecord>,
    /// Requests that still failed after retries. Their indices can be
    /// requested again later.
    pub failures: Vec<GenerationFailure>,
}

impl GenerationOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Samples `sampling.num_samples` candidates of `kind` for `task`.
pub fn generate<P: ChatProvider + ?Sized>(
    task: &Task,
    kind: CandidateKind,
    sampling: &SamplingConfig,
    provider: &P,
    config: &ProviderConfig,
    think: &ThinkDelimiters,
) -> Result<GenerationOutcome> {
    let indices: Vec<usize> = (0..sampling.num_samples).collect();
    generate_indices(task, kind, &indices, &PromptTemplate::for_kind(kind), sampling, provider, config, think)
}

/// Samples the candidates with the given indices, with at most
/// `config.concurrent_request_limit` requests in flight. An authentication
/// failure aborts the whole batch; other failures are collected per index.
#[allow(clippy::too_many_arguments)]
pub fn generate_indices<P: ChatProvider + ?Sized>(
    task: &Task,
    kind: CandidateKind,
    indices: &[usize],
    template: &PromptTemplate,
    sampling: &SamplingConfig,
    provider: &P,
    config: &ProviderConfig,
    think: &ThinkDelimiters,
) -> Result<GenerationOutcome> {
    sampling.validate()?;
    let prompt = template.render(task)?;
    let workers = config.concurrent_request_limit.max(1).min(indices.len());

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Completion>)>> = Mutex::new(Vec::with_capacity(indices.len()));
    let abort = std::sync::atomic::AtomicBool::new(false);

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let slot = next.fetch_add(1, Ordering::Relaxed);
                let Some(&index) = indices.get(slot) else {
                    break;
                };
                let result = complete_with_retries(provider, &prompt, sampling, config);
                if matches!(result, Err(Error::Auth(_))) {
                    abort.store(true, Ordering::Relaxed);
                }
                results.lock().expect("results lock").push((index, result));
            });
        }
    });

    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);

    let mut outcome = GenerationOutcome::default();
    for (index, result) in results {
        match result {
            Ok(completion) => {
                let (record, failure) =
                    parse_candidate(&task.id, kind, index, completion.text, completion.completion_tokens, think);
                if let Some(f) = failure {
                    log::debug!("task {} {kind} #{index}: {f}", task.id);
                }
                outcome.records.push(record);
            }
            Err(Error::Auth(msg)) => return Err(Error::Auth(msg)),
            Err(e) => outcome.failures.push(GenerationFailure {
                index,
                message: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}
