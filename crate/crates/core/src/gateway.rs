//! Chat-completions gateway.
//!
//! Requests go through a [`ChatTransport`]. The gateway adds retries with
//! exponential backoff and full jitter, and a hard bound on the number of
//! requests in flight during [`Gateway::complete_batch`].
//!
//! Wire shape: `{model, messages: [{role: "system"}, {role: "user"}],
//! temperature, max_tokens}`; the reply is read from
//! `choices[0].message.content`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};

const MAX_BACKOFF: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: String,
}

impl CompletionRequest {
    /// JSON body in the chat-completions wire shape.
    pub fn wire_body(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system_text},
                {"role": "user", "content": self.user_text},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    pub api_key_env_name: String,
    pub max_in_flight: usize,
    pub retry_max: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env_name: "OPENAI_API_KEY".into(),
            max_in_flight: 64,
            retry_max: 3,
            backoff_base_ms: 500,
            timeout_ms: 120_000,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be >= 1".into());
        }
        if self.base_url.is_empty() {
            return Err("base_url must not be empty".into());
        }
        Ok(())
    }

    /// Upper bound of the jittered delay before retry number `attempt`
    /// (1-based): `base * 2^(attempt-1)`, capped.
    pub fn backoff_ceiling(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(30);
        let ms = self.backoff_base_ms.saturating_mul(1u64 << exp);
        Duration::from_millis(ms).min(MAX_BACKOFF)
    }
}

/// Why a single transport call failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Status { code: u16, body: String },
    Network(String),
    Malformed(String),
}

impl TransportFailure {
    fn is_retryable(&self) -> bool {
        match self {
            TransportFailure::Status { code, .. } => *code == 429 || (500..600).contains(code),
            TransportFailure::Network(_) => true,
            TransportFailure::Malformed(_) => false,
        }
    }

    fn status(&self) -> Option<u16> {
        match self {
            TransportFailure::Status { code, .. } => Some(*code),
            _ => None,
        }
    }
}

impl std::fmt::Display for TransportFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportFailure::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            TransportFailure::Network(m) => write!(f, "network error: {m}"),
            TransportFailure::Malformed(m) => write!(f, "malformed response: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("retries exhausted after {attempts} attempts (last status {last_status:?}): {message}")]
    TransportExhausted { attempts: u32, last_status: Option<u16>, message: String },
    #[error("request rejected with HTTP {status}: {body}")]
    PermanentRejection { status: u16, body: String },
    #[error("malformed completion: {0}")]
    Malformed(String),
    #[error("duplicate tag `{0}` in batch")]
    DuplicateTag(String),
}

/// Sends one request and returns the first choice's message text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportFailure>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub model: String,
    pub system_text: String,
    pub user_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    pub attempts: u32,
}

pub struct Gateway {
    transport: Arc<dyn ChatTransport>,
    config: GatewayConfig,
    transcript: Mutex<Vec<TranscriptEntry>>,
    record: bool,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(transport: Arc<dyn ChatTransport>, config: GatewayConfig) -> Self {
        Gateway { transport, config, transcript: Mutex::new(Vec::new()), record: true }
    }

    #[cfg(feature = "http")]
    pub fn http(config: GatewayConfig) -> Self {
        let transport = Arc::new(HttpTransport::new(&config));
        Self::new(transport, config)
    }

    pub fn without_transcript(mut self) -> Self {
        self.record = false;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Takes the recorded transcript, sorted by tag.
    pub fn take_transcript(&self) -> Vec<TranscriptEntry> {
        let mut t = std::mem::take(&mut *self.transcript.lock().expect("transcript lock"));
        t.sort_by(|a, b| a.tag.cmp(&b.tag));
        t
    }

    fn record(&self, req: &CompletionRequest, outcome: &Result<Completion, GatewayError>, attempts: u32) {
        if !self.record {
            return;
        }
        let (response, error, status) = match outcome {
            Ok(c) => (Some(c.text.clone()), None, None),
            Err(e) => {
                let status = match e {
                    GatewayError::TransportExhausted { last_status, .. } => *last_status,
                    GatewayError::PermanentRejection { status, .. } => Some(*status),
                    _ => None,
                };
                (None, Some(e.to_string()), status)
            }
        };
        self.transcript.lock().expect("transcript lock").push(TranscriptEntry {
            tag: req.tag.clone(),
            model: req.model.clone(),
            system_text: req.system_text.clone(),
            user_text: req.user_text.clone(),
            response,
            error,
            status,
            attempts,
        });
    }

    /// Completes one request, retrying transport errors, 429 and 5xx.
    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let mut jitter = rng::agent_stream(0, &request.tag, 0, Stream::Jitter);
        let mut attempt = 0u32;
        let outcome = loop {
            attempt += 1;
            match self.transport.send(request) {
                Ok(text) => break Ok(Completion { text, attempts: attempt }),
                Err(f) if !f.is_retryable() => {
                    break Err(match f {
                        TransportFailure::Status { code, body } => GatewayError::PermanentRejection { status: code, body },
                        other => GatewayError::Malformed(other.to_string()),
                    });
                }
                Err(f) => {
                    if attempt > self.config.retry_max {
                        break Err(GatewayError::TransportExhausted {
                            attempts: attempt,
                            last_status: f.status(),
                            message: f.to_string(),
                        });
                    }
                    tracing::debug!(tag = %request.tag, attempt, failure = %f, "retrying completion");
                    let ceiling = self.config.backoff_ceiling(attempt);
                    if !ceiling.is_zero() {
                        let ms = jitter.random_range(0..=ceiling.as_millis() as u64);
                        std::thread::sleep(Duration::from_millis(ms));
                    }
                }
            }
        };
        self.record(request, &outcome, attempt);
        outcome
    }

    /// Completes a batch with at most `max_in_flight` requests outstanding.
    /// Every tag appears in the result.
    pub fn complete_batch(&self, requests: &[CompletionRequest]) -> BTreeMap<String, Result<Completion, GatewayError>> {
        let mut out = BTreeMap::new();
        let mut unique: Vec<&CompletionRequest> = Vec::with_capacity(requests.len());
        let mut seen = std::collections::HashSet::new();
        for r in requests {
            if seen.insert(r.tag.as_str()) {
                unique.push(r);
            } else {
                out.insert(r.tag.clone(), Err(GatewayError::DuplicateTag(r.tag.clone())));
            }
        }
        if unique.is_empty() {
            return out;
        }
        let workers = self.config.max_in_flight.max(1).min(unique.len());
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(String, Result<Completion, GatewayError>)>> = Mutex::new(Vec::with_capacity(unique.len()));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = unique.get(i) else { break };
                    let res = self.complete(req);
                    results.lock().expect("results lock").push((req.tag.clone(), res));
                });
            }
        });
        for (tag, res) in results.into_inner().expect("results lock") {
            out.insert(tag, res);
        }
        out
    }
}

/// Extracts `choices[0].message.content` from a response body.
pub fn extract_content(body: &str) -> Result<String, TransportFailure> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| TransportFailure::Malformed(format!("invalid JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| TransportFailure::Malformed("missing choices[0].message.content".into()))
}

#[cfg(feature = "http")]
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key_env_name: String,
}

#[cfg(feature = "http")]
impl HttpTransport {
    pub fn new(config: &GatewayConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = config.base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") { base.to_owned() } else { format!("{base}/chat/completions") };
        HttpTransport { agent, url, api_key_env_name: config.api_key_env_name.clone() }
    }
}

#[cfg(feature = "http")]
impl ChatTransport for HttpTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportFailure> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Ok(key) = std::env::var(&self.api_key_env_name) {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request.wire_body()).map_err(|e| TransportFailure::Network(e.to_string()))?;
        let code = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| TransportFailure::Network(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(TransportFailure::Status { code, body });
        }
        extract_content(&body)
    }
}

/// Scripted reply for [`MockTransport`].
#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Text(String),
    Status(u16),
    Network,
}

/// In-memory transport with per-tag scripted replies and concurrency
/// instrumentation.
#[derive(Debug, Default)]
pub struct MockTransport {
    scripts: Mutex<HashMap<String, VecDeque<MockReply>>>,
    fallback: Option<String>,
    delay: Duration,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
    attempts: Mutex<HashMap<String, u32>>,
}

impl MockTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reply used for tags without a script (or once the script is spent).
    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn script(self, tag: impl Into<String>, replies: impl IntoIterator<Item = MockReply>) -> Self {
        self.scripts.lock().expect("scripts lock").insert(tag.into(), replies.into_iter().collect());
        self
    }

    pub fn reply(self, tag: impl Into<String>, text: impl Into<String>) -> Self {
        self.script(tag, [MockReply::Text(text.into())])
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn attempts(&self, tag: &str) -> u32 {
        self.attempts.lock().expect("attempts lock").get(tag).copied().unwrap_or(0)
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportFailure> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        *self.attempts.lock().expect("attempts lock").entry(request.tag.clone()).or_default() += 1;
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let scripted = self.scripts.lock().expect("scripts lock").get_mut(&request.tag).and_then(|q| q.pop_front());
        let out = match scripted {
            Some(MockReply::Text(t)) => Ok(t),
            Some(MockReply::Status(code)) => Err(TransportFailure::Status { code, body: format!("mock status {code}") }),
            Some(MockReply::Network) => Err(TransportFailure::Network("mock connection reset".into())),
            None => self
                .fallback
                .clone()
                .ok_or_else(|| TransportFailure::Status { code: 404, body: format!("no mock reply for `{}`", request.tag) }),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

/// Plays back a recorded transcript by tag.
#[derive(Debug, Clone, Default)]
pub struct TranscriptTransport {
    entries: HashMap<String, TranscriptEntry>,
}

impl TranscriptTransport {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        TranscriptTransport { entries: entries.into_iter().map(|e| (e.tag.clone(), e)).collect() }
    }

    pub fn from_jsonl<R: BufRead>(input: R) -> Result<Self, serde_json::Error> {
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str::<TranscriptEntry>(&line)?);
            }
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatTransport for TranscriptTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportFailure> {
        match self.entries.get(&request.tag) {
            Some(TranscriptEntry { response: Some(text), .. }) => Ok(text.clone()),
            Some(TranscriptEntry { status: Some(code), error, .. }) => {
                // Replay as a permanent failure so the recorded outcome class repeats without retries.
                let code = if *code == 429 || *code >= 500 { 400 } else { *code };
                Err(TransportFailure::Status { code, body: error.clone().unwrap_or_default() })
            }
            Some(TranscriptEntry { error, .. }) => Err(TransportFailure::Malformed(error.clone().unwrap_or_default())),
            None => Err(TransportFailure::Status { code: 404, body: format!("tag `{}` not in transcript", request.tag) }),
        }
    }
}

pub fn write_transcript<W: Write>(entries: &[TranscriptEntry], mut out: W) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
