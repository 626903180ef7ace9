//! Client for OpenAI-compatible chat-completion endpoints.
//!
//! The [`Gateway`] resolves friendly model keys through a [`ModelRegistry`],
//! meters token usage and cost, retries transient failures, bounds per-model
//! parallelism and can record or replay every exchange through a
//! [`Cassette`] so that LLM-backed runs are reproducible offline.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Rough per-month token budget of a five-agent simulation.
pub const INPUT_TOKENS_PER_MONTH: u64 = 40_000;
pub const OUTPUT_TOKENS_PER_MONTH: u64 = 10_000;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown model key '{0}'")]
    UnknownModel(String),
    #[error("missing credential: environment variable {var} is not set (model {model})")]
    MissingCredential { model: String, var: String },
    #[error("authentication failed for model {model} (HTTP {status}): {detail}")]
    Auth { model: String, status: u16, detail: String },
    #[error("transport error for model {model} after {attempts} attempts: {detail}")]
    Transport {
        model: String,
        attempts: u32,
        detail: String,
    },
    #[error("unexpected response for model {model}: {detail}")]
    Protocol { model: String, detail: String },
    #[error("cassette mismatch for model {model}: {detail}")]
    ReplayMismatch { model: String, detail: String },
    #[error("cassette {path}: {detail}")]
    Cassette { path: String, detail: String },
    #[error("model registry {path}: {detail}")]
    Registry { path: String, detail: String },
    #[error("live network call attempted for model {0} but the gateway is offline")]
    Offline(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: None,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}

/// Anything that can answer a chat request for a registered model key.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        model_key: &str,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, GatewayError>;

    /// Sampling settings to use for a model when the caller has none.
    fn sampling_for(&self, _model_key: &str) -> SamplingParams {
        SamplingParams::default()
    }

    fn pricing_for(&self, _model_key: &str) -> Option<Pricing> {
        None
    }

    fn has_model(&self, _model_key: &str) -> bool {
        true
    }
}

/// USD per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub input_per_m: f64,
    pub output_per_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRegistryEntry {
    pub key: String,
    pub api_identifier: String,
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<Pricing>,
    #[serde(default = "one")]
    pub max_parallel: usize,
    /// Environment variable holding the bearer token, if the endpoint needs one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub sampling: SamplingParams,
}

fn one() -> usize {
    1
}

const OPENAI_URL: &str = "https://api.openai.com/v1";
const DEEPSEEK_URL: &str = "https://api.deepseek.com/v1";
const LOCAL_URL: &str = "http://localhost:8000/v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelRegistry {
    entries: BTreeMap<String, ModelRegistryEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(default)]
    model: Vec<ModelRegistryEntry>,
}

impl ModelRegistry {
    /// Models used in the published experiments. Prices are chosen so that
    /// [`estimate_run_cost`] reproduces the published per-run costs.
    pub fn builtin() -> Self {
        let api = |key: &str, id: &str, url: &str, env: &str, pin: f64, pout: f64| ModelRegistryEntry {
            key: key.into(),
            api_identifier: id.into(),
            base_url: url.into(),
            pricing: Some(Pricing {
                input_per_m: pin,
                output_per_m: pout,
            }),
            max_parallel: 5,
            api_key_env: Some(env.into()),
            sampling: SamplingParams::default(),
        };
        let local = |key: &str, id: &str| ModelRegistryEntry {
            key: key.into(),
            api_identifier: id.into(),
            base_url: LOCAL_URL.into(),
            pricing: None,
            max_parallel: 1,
            api_key_env: None,
            sampling: SamplingParams::default(),
        };
        let entries = [
            local("llama-3-8b", "meta-llama/Meta-Llama-3-8B-Instruct"),
            local("llama-3-70b", "meta-llama/Meta-Llama-3-70B-Instruct"),
            local("llama-2-7b", "meta-llama/Llama-2-7b-chat-hf"),
            local("llama-2-13b", "meta-llama/Llama-2-13b-chat-hf"),
            local("mistral-7b", "mistralai/Mistral-7B-Instruct-v0.2"),
            local("qwen2.5-0.5b", "Qwen/Qwen2.5-0.5B-Instruct"),
            local("qwen2.5-7b", "Qwen/Qwen2.5-7B-Instruct"),
            api(
                "deepseek-v3",
                "deepseek-chat",
                DEEPSEEK_URL,
                "DEEPSEEK_API_KEY",
                0.10,
                0.27,
            ),
            api(
                "gpt-3.5",
                "gpt-3.5-turbo-0125",
                OPENAI_URL,
                "OPENAI_API_KEY",
                0.50,
                1.50,
            ),
            api(
                "gpt-4-turbo",
                "gpt-4-turbo-2024-04-09",
                OPENAI_URL,
                "OPENAI_API_KEY",
                10.0,
                15.0,
            ),
            api("gpt-4o", "gpt-4o-2024-05-13", OPENAI_URL, "OPENAI_API_KEY", 2.50, 10.0),
            api(
                "gpt-4o-mini",
                "gpt-4o-mini-2024-07-18",
                OPENAI_URL,
                "OPENAI_API_KEY",
                0.15,
                0.60,
            ),
        ];
        let mut reg = Self::default();
        for e in entries {
            reg.entries.insert(e.key.clone(), e);
        }
        reg
    }

    pub fn insert(&mut self, entry: ModelRegistryEntry) -> Result<(), GatewayError> {
        let invalid = |detail: String| GatewayError::Protocol {
            model: entry.key.clone(),
            detail,
        };
        if let Some(p) = entry.pricing {
            if !(p.input_per_m >= 0.0 && p.output_per_m >= 0.0) {
                return Err(invalid("pricing must be nonnegative".into()));
            }
        }
        if entry.max_parallel == 0 {
            return Err(invalid("max_parallel must be positive".into()));
        }
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    /// Merges `[[model]]` tables from a TOML file; same keys replace builtins.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), GatewayError> {
        let err = |detail: String| GatewayError::Registry {
            path: path.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: RegistryFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for entry in file.model {
            if !seen.insert(entry.key.clone()) {
                return Err(err(format!("duplicate model key '{}'", entry.key)));
            }
            self.insert(entry)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&ModelRegistryEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ModelRegistryEntry> {
        self.entries.values()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub request_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<Pricing>,
}

impl ModelUsage {
    pub fn cost_usd(&self) -> Option<f64> {
        self.pricing
            .map(|p| self.input_tokens as f64 * p.input_per_m / 1e6 + self.output_tokens as f64 * p.output_per_m / 1e6)
    }
}

/// Token counters per model. Cost is always recomputed from the counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageMeter {
    pub models: BTreeMap<String, ModelUsage>,
}

impl UsageMeter {
    pub fn record(&mut self, model_key: &str, pricing: Option<Pricing>, usage: TokenUsage) {
        let m = self.models.entry(model_key.to_string()).or_default();
        m.input_tokens += usage.prompt_tokens;
        m.output_tokens += usage.completion_tokens;
        m.request_count += 1;
        m.pricing = pricing;
    }

    pub fn merge(&mut self, other: &UsageMeter) {
        for (k, u) in &other.models {
            let m = self.models.entry(k.clone()).or_default();
            m.input_tokens += u.input_tokens;
            m.output_tokens += u.output_tokens;
            m.request_count += u.request_count;
            m.pricing = u.pricing.or(m.pricing);
        }
    }

    pub fn input_tokens(&self) -> u64 {
        self.models.values().map(|m| m.input_tokens).sum()
    }

    pub fn output_tokens(&self) -> u64 {
        self.models.values().map(|m| m.output_tokens).sum()
    }

    pub fn request_count(&self) -> u64 {
        self.models.values().map(|m| m.request_count).sum()
    }

    /// Cost of priced models; unpriced usage contributes nothing.
    pub fn estimated_cost_usd(&self) -> f64 {
        self.models.values().filter_map(ModelUsage::cost_usd).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostEstimate {
    Estimate { usd: f64 },
    Unavailable,
}

/// Expected API spend for a run of `months` months with one model.
pub fn estimate_run_cost(registry: &ModelRegistry, model_key: &str, months: u32) -> Result<CostEstimate, GatewayError> {
    let entry = registry
        .get(model_key)
        .ok_or_else(|| GatewayError::UnknownModel(model_key.to_string()))?;
    Ok(match entry.pricing {
        None => CostEstimate::Unavailable,
        Some(p) => {
            let m = months as f64;
            let usd = m
                * (INPUT_TOKENS_PER_MONTH as f64 * p.input_per_m + OUTPUT_TOKENS_PER_MONTH as f64 * p.output_per_m)
                / 1e6;
            CostEstimate::Estimate { usd }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    Record,
    Replay,
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub request: Value,
    pub response: Value,
}

/// Ordered request/response recordings stored as JSON lines.
#[derive(Debug)]
pub struct Cassette {
    mode: CassetteMode,
    path: Option<PathBuf>,
    entries: Vec<CassetteEntry>,
    consumed: Vec<bool>,
    by_digest: BTreeMap<String, VecDeque<usize>>,
    sink: Option<File>,
}

impl Cassette {
    pub fn passthrough() -> Self {
        Self::in_memory(CassetteMode::Passthrough, Vec::new())
    }

    pub fn in_memory(mode: CassetteMode, entries: Vec<CassetteEntry>) -> Self {
        let mut by_digest: BTreeMap<String, VecDeque<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_digest.entry(e.digest.clone()).or_default().push_back(i);
        }
        Self {
            mode,
            path: None,
            consumed: vec![false; entries.len()],
            entries,
            by_digest,
            sink: None,
        }
    }

    /// Opens a cassette file for replay.
    pub fn open_replay(path: &Path) -> Result<Self, GatewayError> {
        let err = |detail: String| GatewayError::Cassette {
            path: path.display().to_string(),
            detail,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        let mut c = Self::in_memory(CassetteMode::Replay, entries);
        c.path = Some(path.to_path_buf());
        Ok(c)
    }

    /// Creates (truncating) a cassette file that grows by one line per request.
    pub fn create_record(path: &Path) -> Result<Self, GatewayError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| GatewayError::Cassette {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        }
        let sink = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| GatewayError::Cassette {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        let mut c = Self::in_memory(CassetteMode::Record, Vec::new());
        c.path = Some(path.to_path_buf());
        c.sink = Some(sink);
        Ok(c)
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn entries(&self) -> &[CassetteEntry] {
        &self.entries
    }

    /// Entries not yet served in replay.
    pub fn remaining(&self) -> usize {
        self.consumed.iter().filter(|c| !**c).count()
    }

    fn label(&self) -> String {
        self.path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<memory>".into())
    }

    /// Serves the recorded response for a request, in recorded order among
    /// identical requests.
    fn take(&mut self, model: &str, digest: &str, request: &Value) -> Result<Value, GatewayError> {
        if let Some(i) = self.by_digest.get_mut(digest).and_then(|q| q.pop_front()) {
            self.consumed[i] = true;
            return Ok(self.entries[i].response.clone());
        }
        let detail = match self.consumed.iter().position(|c| !c) {
            None => format!(
                "{}: request {} not recorded and cassette is exhausted",
                self.label(),
                short(digest)
            ),
            Some(next) => {
                let expected = &self.entries[next].request;
                let path = first_divergence(expected, request, String::new())
                    .unwrap_or_else(|| "<identical body, digest differs>".into());
                format!(
                    "{}: request {} does not match next entry #{} (digest {}); first divergent field `{}`",
                    self.label(),
                    short(digest),
                    next,
                    short(&self.entries[next].digest),
                    path
                )
            }
        };
        Err(GatewayError::ReplayMismatch {
            model: model.to_string(),
            detail,
        })
    }

    fn append(&mut self, entry: CassetteEntry) -> Result<(), GatewayError> {
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("cassette entry serializes");
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|e| GatewayError::Cassette {
                    path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                    detail: e.to_string(),
                })?;
        }
        self.entries.push(entry);
        self.consumed.push(true);
        Ok(())
    }
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

fn first_divergence(expected: &Value, actual: &Value, path: String) -> Option<String> {
    match (expected, actual) {
        (Value::Object(a), Value::Object(b)) => {
            let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (a.get(k), b.get(k)) {
                    (Some(x), Some(y)) => first_divergence(x, y, p),
                    _ => Some(p),
                }
            })
        }
        (Value::Array(a), Value::Array(b)) => {
            let common = a
                .iter()
                .zip(b)
                .enumerate()
                .find_map(|(i, (x, y))| first_divergence(x, y, format!("{path}[{i}]")));
            common.or_else(|| (a.len() != b.len()).then(|| format!("{path}.length")))
        }
        (x, y) if x == y => None,
        _ => Some(if path.is_empty() { "<root>".into() } else { path }),
    }
}

/// Stable content digest of a request body.
pub fn request_digest(request: &Value) -> String {
    let canonical = serde_json::to_string(request).expect("json value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Minimal HTTP POST used by the gateway; swapped out in tests.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, TransportError> {
        let mut req = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError(e.without_url().to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// Transport that refuses every call; used to prove replay runs stay offline.
pub struct OfflineTransport;

impl HttpTransport for OfflineTransport {
    fn post_json(&self, url: &str, _: Option<&str>, _: &str) -> Result<HttpReply, TransportError> {
        panic!("offline transport received a live request to {url}");
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Counting semaphore per model key.
#[derive(Default)]
struct Limiter {
    in_flight: Mutex<BTreeMap<String, usize>>,
    freed: Condvar,
}

struct Permit<'a> {
    limiter: &'a Limiter,
    key: String,
}

impl Limiter {
    fn acquire(&self, key: &str, max: usize) -> Permit<'_> {
        let mut guard = self.in_flight.lock().expect("limiter poisoned");
        while *guard.get(key).unwrap_or(&0) >= max {
            guard = self.freed.wait(guard).expect("limiter poisoned");
        }
        *guard.entry(key.to_string()).or_default() += 1;
        Permit {
            limiter: self,
            key: key.to_string(),
        }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut guard = self.limiter.in_flight.lock().expect("limiter poisoned");
        if let Some(n) = guard.get_mut(&self.key) {
            *n -= 1;
        }
        self.limiter.freed.notify_all();
    }
}

type CredentialSource = Box<dyn Fn(&str) -> Option<String> + Send + Sync>;

pub struct Gateway {
    registry: ModelRegistry,
    transport: Box<dyn HttpTransport>,
    cassette: Mutex<Cassette>,
    meter: Mutex<UsageMeter>,
    limiter: Limiter,
    retry: RetryPolicy,
    credentials: CredentialSource,
}

impl Gateway {
    pub fn new(registry: ModelRegistry, transport: Box<dyn HttpTransport>, cassette: Cassette) -> Self {
        Self {
            registry,
            transport,
            cassette: Mutex::new(cassette),
            meter: Mutex::new(UsageMeter::default()),
            limiter: Limiter::default(),
            retry: RetryPolicy::default(),
            credentials: Box::new(|var| std::env::var(var).ok()),
        }
    }

    /// A gateway that can only serve from a replay cassette.
    pub fn replay_only(registry: ModelRegistry, cassette: Cassette) -> Self {
        Self::new(registry, Box::new(OfflineTransport), cassette)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_credentials(mut self, f: impl Fn(&str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.credentials = Box::new(f);
        self
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn usage(&self) -> UsageMeter {
        self.meter.lock().expect("meter poisoned").clone()
    }

    pub fn reset_usage(&self) {
        *self.meter.lock().expect("meter poisoned") = UsageMeter::default();
    }

    pub fn cassette_mode(&self) -> CassetteMode {
        self.cassette.lock().expect("cassette poisoned").mode()
    }

    pub fn cassette_remaining(&self) -> usize {
        self.cassette.lock().expect("cassette poisoned").remaining()
    }

    pub fn build_request(entry: &ModelRegistryEntry, messages: &[ChatMessage], params: &SamplingParams) -> Value {
        let mut body = json!({
            "model": entry.api_identifier,
            "messages": messages,
            "temperature": params.temperature,
        });
        if let Some(p) = params.top_p {
            body["top_p"] = json!(p);
        }
        if let Some(m) = params.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }

    fn parse_response(model: &str, body: &Value) -> Result<Completion, GatewayError> {
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Protocol {
                model: model.to_string(),
                detail: "missing choices[0].message.content".into(),
            })?;
        let count = |p: &str| body.pointer(p).and_then(Value::as_u64).unwrap_or(0);
        Ok(Completion {
            text: text.to_string(),
            usage: TokenUsage {
                prompt_tokens: count("/usage/prompt_tokens"),
                completion_tokens: count("/usage/completion_tokens"),
            },
        })
    }

    fn send_live(&self, entry: &ModelRegistryEntry, body: &str) -> Result<Value, GatewayError> {
        let token = match &entry.api_key_env {
            Some(var) => Some((self.credentials)(var).ok_or_else(|| GatewayError::MissingCredential {
                model: entry.key.clone(),
                var: var.clone(),
            })?),
            None => None,
        };
        let redact = |s: &str| -> String {
            let s: String = s.chars().take(300).collect();
            match &token {
                Some(t) if !t.is_empty() => s.replace(t.as_str(), "[REDACTED]"),
                _ => s,
            }
        };
        let url = format!("{}/chat/completions", entry.base_url.trim_end_matches('/'));
        let _permit = self.limiter.acquire(&entry.key, entry.max_parallel);
        let mut last_error = String::new();
        for attempt in 1..=self.retry.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 2));
            }
            match self.transport.post_json(&url, token.as_deref(), body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return serde_json::from_str(&reply.body).map_err(|e| GatewayError::Protocol {
                        model: entry.key.clone(),
                        detail: format!("invalid JSON body: {e}"),
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::Auth {
                        model: entry.key.clone(),
                        status: reply.status,
                        detail: redact(&reply.body),
                    });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_error = format!("HTTP {}: {}", reply.status, redact(&reply.body));
                }
                Ok(reply) => {
                    return Err(GatewayError::Protocol {
                        model: entry.key.clone(),
                        detail: format!("HTTP {}: {}", reply.status, redact(&reply.body)),
                    });
                }
                Err(e) => last_error = redact(&e.0),
            }
            log::warn!("{}: attempt {attempt} failed: {last_error}", entry.key);
        }
        Err(GatewayError::Transport {
            model: entry.key.clone(),
            attempts: self.retry.max_attempts,
            detail: last_error,
        })
    }
}

impl ChatBackend for Gateway {
    fn complete(
        &self,
        model_key: &str,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, GatewayError> {
        let entry = self
            .registry
            .get(model_key)
            .ok_or_else(|| GatewayError::UnknownModel(model_key.to_string()))?;
        let request = Self::build_request(entry, messages, params);
        let digest = request_digest(&request);

        let mode = self.cassette_mode();
        let response = if mode == CassetteMode::Replay {
            self.cassette
                .lock()
                .expect("cassette poisoned")
                .take(model_key, &digest, &request)?
        } else {
            let body = serde_json::to_string(&request).expect("request serializes");
            let response = self.send_live(entry, &body)?;
            if mode == CassetteMode::Record {
                self.cassette.lock().expect("cassette poisoned").append(CassetteEntry {
                    digest,
                    request,
                    response: response.clone(),
                })?;
            }
            response
        };
        let completion = Self::parse_response(model_key, &response)?;
        self.meter
            .lock()
            .expect("meter poisoned")
            .record(model_key, entry.pricing, completion.usage);
        Ok(completion)
    }

    fn pricing_for(&self, model_key: &str) -> Option<Pricing> {
        self.registry.get(model_key).and_then(|e| e.pricing)
    }

    fn has_model(&self, model_key: &str) -> bool {
        self.registry.get(model_key).is_some()
    }

    fn sampling_for(&self, model_key: &str) -> SamplingParams {
        self.registry
            .get(model_key)
            .map(|e| e.sampling.clone())
            .unwrap_or_default()
    }
}

/// Builds an OpenAI-style response body; handy for stubs and fixtures.
pub fn response_body(text: &str, prompt_tokens: u64, completion_tokens: u64) -> Value {
    json!({
        "id": "chatcmpl-fixture",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": prompt_tokens + completion_tokens
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Scripted {
        replies: Mutex<VecDeque<Result<HttpReply, TransportError>>>,
        calls: Arc<AtomicUsize>,
        seen_bearer: Mutex<Option<String>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<HttpReply, TransportError>>) -> (Self, Arc<AtomicUsize>) {
            let calls = Arc::new(AtomicUsize::new(0));
            (
                Self {
                    replies: Mutex::new(replies.into()),
                    calls: calls.clone(),
                    seen_bearer: Mutex::new(None),
                },
                calls,
            )
        }
    }

    impl HttpTransport for Scripted {
        fn post_json(&self, _url: &str, bearer: Option<&str>, _body: &str) -> Result<HttpReply, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            *self.seen_bearer.lock().unwrap() = bearer.map(String::from);
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .expect("no scripted reply left")
        }
    }

    fn ok(text: &str) -> Result<HttpReply, TransportError> {
        Ok(HttpReply {
            status: 200,
            body: response_body(text, 100, 10).to_string(),
        })
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    fn msgs() -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user("how many?")]
    }

    #[test]
    fn retries_transient_failures_then_succeeds() {
        let (t, calls) = Scripted::new(vec![
            Ok(HttpReply {
                status: 503,
                body: "busy".into(),
            }),
            Err(TransportError("reset".into())),
            ok("10"),
        ]);
        let gw = Gateway::new(ModelRegistry::builtin(), Box::new(t), Cassette::passthrough())
            .with_retry(fast())
            .with_credentials(|_| Some("sk-secret".into()));
        let c = gw.complete("gpt-4o-mini", &msgs(), &SamplingParams::default()).unwrap();
        assert_eq!(c.text, "10");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let usage = gw.usage();
        assert_eq!(usage.request_count(), 1);
        assert_eq!(usage.input_tokens(), 100);
    }

    #[test]
    fn retry_exhaustion_is_transport_error() {
        let (t, calls) = Scripted::new(vec![
            Ok(HttpReply {
                status: 429,
                body: "slow down".into(),
            }),
            Ok(HttpReply {
                status: 500,
                body: "x".into(),
            }),
            Ok(HttpReply {
                status: 502,
                body: "y".into(),
            }),
        ]);
        let gw = Gateway::new(ModelRegistry::builtin(), Box::new(t), Cassette::passthrough())
            .with_retry(fast())
            .with_credentials(|_| Some("k".into()));
        let err = gw.complete("gpt-4o", &msgs(), &SamplingParams::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }), "{err}");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_failure_is_immediate_and_redacted() {
        let (t, calls) = Scripted::new(vec![Ok(HttpReply {
            status: 401,
            body: "invalid key sk-live-123 provided".into(),
        })]);
        let gw = Gateway::new(ModelRegistry::builtin(), Box::new(t), Cassette::passthrough())
            .with_retry(fast())
            .with_credentials(|_| Some("sk-live-123".into()));
        let err = gw.complete("gpt-4o", &msgs(), &SamplingParams::default()).unwrap_err();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let text = err.to_string();
        assert!(!text.contains("sk-live-123"), "{text}");
        assert!(text.contains("[REDACTED]"));
    }

    #[test]
    fn missing_credential_names_variable() {
        let (t, calls) = Scripted::new(vec![]);
        let gw =
            Gateway::new(ModelRegistry::builtin(), Box::new(t), Cassette::passthrough()).with_credentials(|_| None);
        let err = gw
            .complete("deepseek-v3", &msgs(), &SamplingParams::default())
            .unwrap_err();
        assert!(err.to_string().contains("DEEPSEEK_API_KEY"));
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn unknown_model() {
        let gw = Gateway::replay_only(
            ModelRegistry::builtin(),
            Cassette::in_memory(CassetteMode::Replay, vec![]),
        );
        assert!(matches!(
            gw.complete("gpt-9", &msgs(), &SamplingParams::default()),
            Err(GatewayError::UnknownModel(_))
        ));
    }

    #[test]
    fn replay_serves_without_network_and_reports_divergence() {
        let reg = ModelRegistry::builtin();
        let entry = reg.get("gpt-4o-mini").unwrap();
        let request = Gateway::build_request(entry, &msgs(), &SamplingParams::default());
        let cassette = Cassette::in_memory(
            CassetteMode::Replay,
            vec![CassetteEntry {
                digest: request_digest(&request),
                request,
                response: response_body("I will catch 10 tons.", 50, 5),
            }],
        );
        let gw = Gateway::replay_only(reg, cassette);
        let c = gw.complete("gpt-4o-mini", &msgs(), &SamplingParams::default()).unwrap();
        assert_eq!(c.text, "I will catch 10 tons.");
        assert_eq!(gw.cassette_remaining(), 0);

        let mut other = msgs();
        other[1].content = "how many now?".into();
        let err = gw
            .complete("gpt-4o-mini", &other, &SamplingParams::default())
            .unwrap_err();
        assert!(matches!(err, GatewayError::ReplayMismatch { .. }));
    }

    #[test]
    fn replay_mismatch_names_field() {
        let reg = ModelRegistry::builtin();
        let entry = reg.get("gpt-4o-mini").unwrap();
        let request = Gateway::build_request(entry, &msgs(), &SamplingParams::default());
        let cassette = Cassette::in_memory(
            CassetteMode::Replay,
            vec![CassetteEntry {
                digest: request_digest(&request),
                request,
                response: response_body("x", 1, 1),
            }],
        );
        let gw = Gateway::replay_only(reg, cassette);
        let mut other = msgs();
        other[1].content = "different".into();
        let err = gw
            .complete("gpt-4o-mini", &other, &SamplingParams::default())
            .unwrap_err();
        assert!(err.to_string().contains("messages[1].content"), "{err}");
        let hot = SamplingParams {
            temperature: 0.2,
            ..Default::default()
        };
        let err = gw.complete("gpt-4o-mini", &msgs(), &hot).unwrap_err();
        assert!(err.to_string().contains("`temperature`"), "{err}");
    }

    #[test]
    fn meter_cost_tracks_counters() {
        let mut m = UsageMeter::default();
        let p = Some(Pricing {
            input_per_m: 2.0,
            output_per_m: 8.0,
        });
        m.record(
            "a",
            p,
            TokenUsage {
                prompt_tokens: 1_000_000,
                completion_tokens: 500_000,
            },
        );
        m.record(
            "a",
            p,
            TokenUsage {
                prompt_tokens: 0,
                completion_tokens: 500_000,
            },
        );
        m.record(
            "local",
            None,
            TokenUsage {
                prompt_tokens: 7,
                completion_tokens: 7,
            },
        );
        assert_eq!(m.input_tokens(), 1_000_007);
        assert_eq!(m.request_count(), 3);
        assert!((m.estimated_cost_usd() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_examples() {
        let reg = ModelRegistry::builtin();
        match estimate_run_cost(&reg, "gpt-4o-mini", 12).unwrap() {
            CostEstimate::Estimate { usd } => assert!((usd - 0.14).abs() < 0.01, "{usd}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            estimate_run_cost(&reg, "gpt-4o", 0).unwrap(),
            CostEstimate::Estimate { usd: 0.0 }
        );
        assert_eq!(
            estimate_run_cost(&reg, "qwen2.5-7b", 12).unwrap(),
            CostEstimate::Unavailable
        );
        assert!(estimate_run_cost(&reg, "nope", 12).is_err());
    }

    #[test]
    fn digest_ignores_nothing_but_is_stable() {
        let reg = ModelRegistry::builtin();
        let e = reg.get("gpt-4o").unwrap();
        let a = Gateway::build_request(e, &msgs(), &SamplingParams::default());
        let b = Gateway::build_request(e, &msgs(), &SamplingParams::default());
        assert_eq!(request_digest(&a), request_digest(&b));
        let c = Gateway::build_request(reg.get("gpt-4o-mini").unwrap(), &msgs(), &SamplingParams::default());
        assert_ne!(request_digest(&a), request_digest(&c));
    }

    #[test]
    fn limiter_bounds_parallelism() {
        let limiter = Arc::new(Limiter::default());
        let peak = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (limiter, peak, current) = (limiter.clone(), peak.clone(), current.clone());
                s.spawn(move || {
                    let _p = limiter.acquire("m", 2);
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
