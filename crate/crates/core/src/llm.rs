//! LLM backend abstraction.
//!
//! Every model interaction is a single stateless exchange: one system
//! message plus one user message, no chat history. Retries re-send the same
//! prompt at a higher temperature, following the escalation schedule
//! (`base + attempt * step`, capped). A per-run token ledger records the
//! cost of every exchange, keyed by phase tag, with retries attributed
//! separately so the overhead of verification-driven re-analysis is
//! measurable.
//!
//! Three backends: `http` speaks the chat-completions wire format,
//! `scripted` replays a recorded cassette deterministically, and `record`
//! wraps another backend and writes a cassette as it goes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("response truncated at max_output_tokens ({0} completion tokens)")]
    ResponseTruncated(u64),
}

/// Which pipeline phase issued a request. Keys the cassette and the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    PseudoExec,
    Format,
    IdentifyVariable,
}

impl PhaseTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseTag::PseudoExec => "pseudo_exec",
            PhaseTag::Format => "format",
            PhaseTag::IdentifyVariable => "identify_variable",
        }
    }
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stateless exchange: exactly one system and one user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub tag: PhaseTag,
}

impl LlmRequest {
    pub fn new(tag: PhaseTag, system_prompt: String, user_prompt: String) -> LlmRequest {
        LlmRequest {
            system_prompt,
            user_prompt,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            tag,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) || self.temperature.is_nan() {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens is 0".into()));
        }
        if self.user_prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty user prompt".into()));
        }
        Ok(())
    }

    /// Content digest used for cassette matching; temperature excluded so a
    /// retried (identical) prompt matches the same entries.
    pub fn prompt_sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.system_prompt.as_bytes());
        hasher.update(b"\n");
        hasher.update(self.user_prompt.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// What a backend returns. Truncation is surfaced as data so the session
/// can account tokens before raising [`LlmError::ResponseTruncated`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_id: String,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<BackendReply, LlmError>;
    fn id(&self) -> &str;
}

/// Temperature escalation: attempt `n` runs at `min(base + n*step, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub base: f64,
    pub step: f64,
    pub cap: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> TemperatureSchedule {
        TemperatureSchedule {
            base: 0.0,
            step: 0.2,
            cap: 2.0,
        }
    }
}

impl TemperatureSchedule {
    pub fn temperature_for(&self, attempt: u32) -> f64 {
        (self.base + attempt as f64 * self.step).min(self.cap)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LedgerEntry {
    tag: PhaseTag,
    prompt_tokens: u64,
    completion_tokens: u64,
    retry: bool,
}

/// Token counts for one slice of the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenCounts {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    fn add(&mut self, prompt: u64, completion: u64) {
        self.prompt_tokens += prompt;
        self.completion_tokens += completion;
    }
}

/// Aggregated ledger view: totals per phase, overall, and the share spent
/// on retries (re-analysis forced by verification failures).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub per_phase: BTreeMap<String, TokenCounts>,
    pub total: TokenCounts,
    pub retry: TokenCounts,
    /// retry.total / total.total, 0 when nothing was spent.
    pub retry_ratio: f64,
}

#[derive(Debug, Default)]
pub struct TokenLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl TokenLedger {
    pub fn new() -> TokenLedger {
        TokenLedger::default()
    }

    pub fn record(&self, tag: PhaseTag, prompt_tokens: u64, completion_tokens: u64, retry: bool) {
        self.entries.lock().unwrap().push(LedgerEntry {
            tag,
            prompt_tokens,
            completion_tokens,
            retry,
        });
    }

    pub fn report(&self) -> TokenReport {
        let entries = self.entries.lock().unwrap();
        let mut report = TokenReport::default();
        for entry in entries.iter() {
            report
                .per_phase
                .entry(entry.tag.as_str().to_string())
                .or_default()
                .add(entry.prompt_tokens, entry.completion_tokens);
            report.total.add(entry.prompt_tokens, entry.completion_tokens);
            if entry.retry {
                report.retry.add(entry.prompt_tokens, entry.completion_tokens);
            }
        }
        report.retry_ratio = ratio(report.retry.total(), report.total.total());
        report
    }
}

pub fn ratio(numerator: u64, denominator: u64) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

/// A backend plus the run's token ledger. `retry` marks exchanges caused by
/// re-analysis so their cost can be attributed.
pub struct LlmSession {
    backend: Box<dyn LlmBackend>,
    ledger: TokenLedger,
}

impl LlmSession {
    pub fn new(backend: Box<dyn LlmBackend>) -> LlmSession {
        LlmSession {
            backend,
            ledger: TokenLedger::new(),
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn complete(&self, request: &LlmRequest, retry: bool) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let reply = self.backend.complete(request)?;
        self.ledger
            .record(request.tag, reply.prompt_tokens, reply.completion_tokens, retry);
        if reply.truncated {
            return Err(LlmError::ResponseTruncated(reply.completion_tokens));
        }
        Ok(LlmResponse {
            text: reply.text,
            prompt_tokens: reply.prompt_tokens,
            completion_tokens: reply.completion_tokens,
            backend_id: self.backend.id().to_string(),
        })
    }

    pub fn token_report(&self) -> TokenReport {
        self.ledger.report()
    }
}

// ---------------------------------------------------------------------------
// Cassettes: recorded exchanges, one JSON object per line.

/// Matching constraints of one cassette entry. Absent fields are wildcards;
/// a declared `prompt_sha256` only matches that exact prompt, which is what
/// catches accidental prompt drift when replaying a recorded session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteMatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<PhaseTag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "match")]
    pub match_on: Option<CassetteMatch>,
    pub reply: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

impl CassetteEntry {
    fn matches(&self, request: &LlmRequest) -> bool {
        let Some(m) = &self.match_on else {
            return true;
        };
        if let Some(tag) = m.tag {
            if tag != request.tag {
                return false;
            }
        }
        if let Some(hash) = &m.prompt_sha256 {
            if *hash != request.prompt_sha256() {
                return false;
            }
        }
        true
    }
}

pub fn read_cassette(path: &Path) -> Result<Vec<CassetteEntry>, LlmError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| LlmError::BackendUnavailable(format!("cassette {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CassetteEntry = serde_json::from_str(line).map_err(|e| {
            LlmError::BackendUnavailable(format!(
                "cassette {} line {}: {e}",
                path.display(),
                i + 1
            ))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Replays a cassette. Each request consumes the first unconsumed entry
/// whose constraints it satisfies (declared tag/hash must match; entries
/// without constraints are taken in file order).
pub struct ScriptedBackend {
    entries: Vec<CassetteEntry>,
    consumed: Mutex<Vec<bool>>,
}

impl ScriptedBackend {
    pub fn from_path(path: &Path) -> Result<ScriptedBackend, LlmError> {
        Ok(ScriptedBackend::from_entries(read_cassette(path)?))
    }

    pub fn from_entries(entries: Vec<CassetteEntry>) -> ScriptedBackend {
        let consumed = Mutex::new(vec![false; entries.len()]);
        ScriptedBackend { entries, consumed }
    }

    /// Number of entries not yet replayed.
    pub fn remaining(&self) -> usize {
        self.consumed.lock().unwrap().iter().filter(|c| !**c).count()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &LlmRequest) -> Result<BackendReply, LlmError> {
        let mut consumed = self.consumed.lock().unwrap();
        let slot = self
            .entries
            .iter()
            .enumerate()
            .position(|(i, entry)| !consumed[i] && entry.matches(request));
        let Some(i) = slot else {
            return Err(LlmError::BackendUnavailable(format!(
                "cassette has no remaining entry for tag {} (prompt {})",
                request.tag,
                &request.prompt_sha256()[..12],
            )));
        };
        consumed[i] = true;
        let entry = &self.entries[i];
        Ok(BackendReply {
            text: entry.reply.clone(),
            prompt_tokens: entry.prompt_tokens,
            completion_tokens: entry.completion_tokens,
            truncated: false,
        })
    }

    fn id(&self) -> &str {
        "scripted"
    }
}

/// Wraps another backend and appends every exchange to a cassette file.
pub struct RecordBackend {
    inner: Box<dyn LlmBackend>,
    path: PathBuf,
    file: Mutex<fs::File>,
}

impl RecordBackend {
    pub fn create(inner: Box<dyn LlmBackend>, path: &Path) -> Result<RecordBackend, LlmError> {
        let file = fs::File::create(path)
            .map_err(|e| LlmError::BackendUnavailable(format!("cassette {}: {e}", path.display())))?;
        Ok(RecordBackend {
            inner,
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl LlmBackend for RecordBackend {
    fn complete(&self, request: &LlmRequest) -> Result<BackendReply, LlmError> {
        let reply = self.inner.complete(request)?;
        let entry = CassetteEntry {
            match_on: Some(CassetteMatch {
                tag: Some(request.tag),
                prompt_sha256: Some(request.prompt_sha256()),
            }),
            reply: reply.text.clone(),
            prompt_tokens: reply.prompt_tokens,
            completion_tokens: reply.completion_tokens,
        };
        let line = serde_json::to_string(&entry).expect("cassette entry serializes");
        let mut file = self.file.lock().unwrap();
        writeln!(file, "{line}")
            .and_then(|_| file.flush())
            .map_err(|e| LlmError::BackendUnavailable(format!("cassette write: {e}")))?;
        Ok(reply)
    }

    fn id(&self) -> &str {
        "record"
    }
}

// ---------------------------------------------------------------------------
// HTTP backend (chat-completions wire format).

#[cfg(feature = "http")]
pub use http_backend::{HttpBackend, HttpConfig};

#[cfg(feature = "http")]
mod http_backend {
    use super::*;

    #[derive(Debug, Clone)]
    pub struct HttpConfig {
        /// Full URL of the chat-completions endpoint.
        pub endpoint: String,
        pub api_key: Option<String>,
        pub model: String,
        pub timeout_secs: u64,
    }

    pub struct HttpBackend {
        config: HttpConfig,
        client: reqwest::blocking::Client,
    }

    #[derive(Serialize)]
    struct WireMessage<'a> {
        role: &'static str,
        content: &'a str,
    }

    #[derive(Serialize)]
    struct WireRequest<'a> {
        model: &'a str,
        messages: [WireMessage<'a>; 2],
        temperature: f64,
        max_tokens: u32,
    }

    #[derive(Deserialize)]
    struct WireChoice {
        message: WireChoiceMessage,
        #[serde(default)]
        finish_reason: Option<String>,
    }

    #[derive(Deserialize)]
    struct WireChoiceMessage {
        #[serde(default)]
        content: String,
    }

    #[derive(Deserialize, Default)]
    struct WireUsage {
        #[serde(default)]
        prompt_tokens: u64,
        #[serde(default)]
        completion_tokens: u64,
    }

    #[derive(Deserialize)]
    struct WireResponse {
        choices: Vec<WireChoice>,
        #[serde(default)]
        usage: Option<WireUsage>,
    }

    impl HttpBackend {
        pub fn new(config: HttpConfig) -> Result<HttpBackend, LlmError> {
            let client = reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(config.timeout_secs))
                .build()
                .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
            Ok(HttpBackend { config, client })
        }
    }

    impl LlmBackend for HttpBackend {
        fn complete(&self, request: &LlmRequest) -> Result<BackendReply, LlmError> {
            let body = WireRequest {
                model: &self.config.model,
                messages: [
                    WireMessage {
                        role: "system",
                        content: &request.system_prompt,
                    },
                    WireMessage {
                        role: "user",
                        content: &request.user_prompt,
                    },
                ],
                temperature: request.temperature,
                max_tokens: request.max_output_tokens,
            };
            let mut http = self.client.post(&self.config.endpoint).json(&body);
            if let Some(key) = &self.config.api_key {
                http = http.bearer_auth(key);
            }
            let response = http
                .send()
                .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
            let status = response.status();
            if !status.is_success() {
                let text = response.text().unwrap_or_default();
                return Err(LlmError::BackendUnavailable(format!(
                    "endpoint returned {status}: {}",
                    text.chars().take(200).collect::<String>()
                )));
            }
            let wire: WireResponse = response
                .json()
                .map_err(|e| LlmError::BackendUnavailable(format!("bad response body: {e}")))?;
            let choice = wire
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| LlmError::BackendUnavailable("response has no choices".into()))?;
            let usage = wire.usage.unwrap_or_default();
            Ok(BackendReply {
                text: choice.message.content,
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
                truncated: choice.finish_reason.as_deref() == Some("length"),
            })
        }

        fn id(&self) -> &str {
            "http"
        }
    }
}
