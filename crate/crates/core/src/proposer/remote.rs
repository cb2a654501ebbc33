//! Chat-completion client for planning and keyword extraction.
//!
//! Requests go through a [`Transport`] so recorded transcripts can be replayed offline.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::grammar::parse_skill;
use super::{ProposalBatch, Provenance};
use crate::model::{Decomposition, Subtask};

pub const PLANNING_TEMPLATE: &str = include_str!("../../prompts/planning_v1.txt");
pub const KEYWORD_TEMPLATE: &str = include_str!("../../prompts/keyword_v1.txt");

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("no valid proposals")]
    NoValidProposals,
    #[error("missing API key in environment variable {0}")]
    MissingKey(String),
    #[error("replay: no recorded response for request {index} attempt {attempt}")]
    ReplayMiss { index: usize, attempt: usize },
    #[error("invalid remote config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_retries: usize,
    pub timeout_secs: f64,
    /// Parallel requests when sampling candidates.
    pub concurrency: usize,
    /// Requests per second allowed by the shared token bucket.
    pub rate_per_sec: f64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "PALO_API_KEY".into(),
            temperature: 1.0,
            max_retries: 3,
            timeout_secs: 60.0,
            concurrency: 4,
            rate_per_sec: 2.0,
        }
    }
}

impl RemoteConfig {
    pub fn validate(&self) -> Result<(), RemoteError> {
        if !(self.timeout_secs > 0.0) {
            return Err(RemoteError::Config("timeout must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(RemoteError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sends one chat-completion request and returns the assistant text.
pub trait Transport: Sync {
    fn complete(&self, index: usize, attempt: usize, request: &Value) -> Result<String, RemoteError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    key: String,
}

impl HttpTransport {
    pub fn new(cfg: &RemoteConfig) -> Result<Self, RemoteError> {
        cfg.validate()?;
        let key = std::env::var(&cfg.api_key_env).map_err(|_| RemoteError::MissingKey(cfg.api_key_env.clone()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .build()
            .into();
        Ok(HttpTransport {
            agent,
            endpoint: cfg.endpoint.clone(),
            key,
        })
    }
}

impl Transport for HttpTransport {
    fn complete(&self, _index: usize, _attempt: usize, request: &Value) -> Result<String, RemoteError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(request)
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| RemoteError::Transport("response has no message content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: usize,
    pub attempt: usize,
    pub request: Value,
    pub response: Option<String>,
    pub error: Option<String>,
}

/// Serves responses from a transcript file written by an earlier run.
pub struct ReplayTransport {
    responses: HashMap<(usize, usize), Result<String, String>>,
}

impl ReplayTransport {
    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        let responses = entries
            .into_iter()
            .map(|e| {
                let r = match (e.response, e.error) {
                    (Some(r), _) => Ok(r),
                    (None, err) => Err(err.unwrap_or_default()),
                };
                ((e.index, e.attempt), r)
            })
            .collect();
        ReplayTransport { responses }
    }

    pub fn load(path: &Path) -> Result<Self, RemoteError> {
        Ok(Self::from_entries(read_transcripts(path)?))
    }
}

impl Transport for ReplayTransport {
    fn complete(&self, index: usize, attempt: usize, _request: &Value) -> Result<String, RemoteError> {
        match self.responses.get(&(index, attempt)) {
            Some(Ok(r)) => Ok(r.clone()),
            Some(Err(e)) => Err(RemoteError::Transport(e.clone())),
            None => Err(RemoteError::ReplayMiss { index, attempt }),
        }
    }
}

pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptEntry>, RemoteError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| RemoteError::Transport(format!("bad transcript line: {e}"))))
        .collect()
}

pub fn write_transcripts(path: &Path, entries: &[TranscriptEntry]) -> Result<(), RemoteError> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e).expect("transcript serializes"))?;
    }
    Ok(())
}

/// Token bucket shared by all remote callers.
pub struct RateLimiter {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(rate_per_sec: f64, burst: usize) -> Self {
        RateLimiter {
            rate: rate_per_sec,
            burst: burst.max(1) as f64,
            state: Mutex::new((burst.max(1) as f64, Instant::now())),
        }
    }

    /// Blocks until a token is available. A nonpositive rate disables limiting.
    pub fn acquire(&self) {
        if !(self.rate > 0.0) {
            return;
        }
        loop {
            let wait = {
                let mut st = self.state.lock().expect("rate limiter lock");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate;
                st.0 = (st.0 + refill).min(self.burst);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Replaces literal `\n` escapes left in the template text with newlines.
fn unescape(t: &str) -> String {
    t.replace("\\n", "\n")
}

pub fn planning_prompt(instruction: &str) -> String {
    unescape(PLANNING_TEMPLATE).replace("{instrs}", instruction)
}

pub fn keyword_prompt(instruction: &str) -> String {
    unescape(KEYWORD_TEMPLATE).replace("{instruction}", instruction)
}

fn chat_request(cfg: &RemoteConfig, content: String) -> Value {
    json!({
        "model": cfg.model,
        "temperature": cfg.temperature,
        "messages": [{"role": "user", "content": content}],
    })
}

/// First balanced `{...}` span, skipping braces inside JSON strings.
pub fn extract_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a planning reply: a JSON object from subtask description to a list of skill strings.
pub fn parse_plan(reply: &str) -> Result<Decomposition, String> {
    let body = extract_json(reply).ok_or("no JSON object in reply")?;
    let v: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("reply is not a JSON object")?;
    let mut subtasks = Vec::new();
    for (high, skills) in obj {
        let arr = skills
            .as_array()
            .ok_or_else(|| format!("value for '{high}' is not a list"))?;
        let mut out = Vec::new();
        for s in arr {
            let s = s.as_str().ok_or_else(|| format!("non-string skill under '{high}'"))?;
            let p = parse_skill(s).map_err(|e| e.to_string())?;
            out.push(p.render());
        }
        subtasks.push(Subtask {
            high: high.clone(),
            skills: out,
        });
    }
    Decomposition::new(subtasks).map_err(|e| e.to_string())
}

/// Requests `m` plans, retrying invalid replies; candidates that never validate are dropped.
pub fn propose_remote(
    scene: &str,
    instruction: &str,
    m: usize,
    cfg: &RemoteConfig,
    transport: &dyn Transport,
    limiter: &RateLimiter,
) -> Result<(ProposalBatch, Vec<TranscriptEntry>), RemoteError> {
    let (batch, entries) = propose_remote_logged(scene, instruction, m, cfg, transport, limiter);
    batch.map(|b| (b, entries))
}

/// Like [`propose_remote`], but keeps the transcript when the batch fails.
pub fn propose_remote_logged(
    scene: &str,
    instruction: &str,
    m: usize,
    cfg: &RemoteConfig,
    transport: &dyn Transport,
    limiter: &RateLimiter,
) -> (Result<ProposalBatch, RemoteError>, Vec<TranscriptEntry>) {
    if let Err(e) = cfg.validate() {
        return (Err(e), Vec::new());
    }
    let content = format!("{}\n\nScene description: {scene}", planning_prompt(instruction));
    let request = chat_request(cfg, content);
    let mut results: Vec<(Option<Decomposition>, Vec<TranscriptEntry>, Option<RemoteError>)> = Vec::with_capacity(m);
    let indices: Vec<usize> = (0..m).collect();
    for group in indices.chunks(cfg.concurrency) {
        let out: Vec<_> = std::thread::scope(|sc| {
            let handles: Vec<_> = group
                .iter()
                .map(|&i| {
                    let request = &request;
                    sc.spawn(move || one_candidate(i, request, cfg, transport, limiter))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        results.extend(out);
    }
    let mut candidates = Vec::new();
    let mut transcripts = Vec::new();
    let mut entries = Vec::new();
    let mut failure = None;
    for (cand, log, err) in results {
        if failure.is_none() {
            failure = err;
        }
        transcripts.extend(log.iter().filter_map(|e| e.response.clone()));
        entries.extend(log);
        if let Some(c) = cand {
            candidates.push(c);
        }
    }
    if let Some(e) = failure {
        return (Err(e), entries);
    }
    if candidates.is_empty() {
        return (Err(RemoteError::NoValidProposals), entries);
    }
    let batch = ProposalBatch {
        candidates,
        provenance: Provenance::Remote {
            model: cfg.model.clone(),
        },
        transcripts,
        truth_index: None,
    };
    (Ok(batch), entries)
}

type CandidateOutcome = (Option<Decomposition>, Vec<TranscriptEntry>, Option<RemoteError>);

fn one_candidate(
    index: usize,
    request: &Value,
    cfg: &RemoteConfig,
    transport: &dyn Transport,
    limiter: &RateLimiter,
) -> CandidateOutcome {
    let mut log = Vec::new();
    let mut transport_failures = 0;
    for attempt in 0..=cfg.max_retries {
        limiter.acquire();
        match transport.complete(index, attempt, request) {
            Ok(reply) => {
                let parsed = parse_plan(&reply);
                log.push(TranscriptEntry {
                    index,
                    attempt,
                    request: request.clone(),
                    response: Some(reply),
                    error: parsed.as_ref().err().cloned(),
                });
                match parsed {
                    Ok(d) => return (Some(d), log, None),
                    Err(e) => log::warn!("candidate {index} attempt {attempt} rejected: {e}"),
                }
            }
            Err(e) => {
                transport_failures += 1;
                log.push(TranscriptEntry {
                    index,
                    attempt,
                    request: request.clone(),
                    response: None,
                    error: Some(e.to_string()),
                });
                if transport_failures > cfg.max_retries {
                    return (None, log, Some(e));
                }
            }
        }
    }
    (None, log, None)
}

/// Keywords of an instruction: the moved object and, if any, the destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Keywords {
    Pair { object: String, destination: Option<String> },
    /// The backend gave no usable answer; labels fall back to proprioception only.
    Sentinel,
}

/// Parses an `"a, b"` keyword reply.
pub fn parse_keywords(reply: &str) -> Keywords {
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_matches(|c| c == '"' || c == '\'' || c == '.');
    let mut parts = line.splitn(2, ',');
    let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
        return Keywords::Sentinel;
    };
    let a = a.trim().to_lowercase();
    let b = b.trim().trim_end_matches('.').to_lowercase();
    if a.is_empty() || a.split_whitespace().count() > 6 {
        return Keywords::Sentinel;
    }
    Keywords::Pair {
        object: a,
        destination: (!b.is_empty() && b != "n/a").then_some(b),
    }
}

/// Remote keyword extraction with retries; transport failure or a malformed reply yields the sentinel.
pub fn extract_keywords_remote(
    instruction: &str,
    cfg: &RemoteConfig,
    transport: &dyn Transport,
    limiter: &RateLimiter,
    index: usize,
) -> Keywords {
    let request = chat_request(cfg, keyword_prompt(instruction));
    for attempt in 0..=cfg.max_retries {
        limiter.acquire();
        match transport.complete(index, attempt, &request) {
            Ok(reply) => return parse_keywords(&reply),
            Err(e) => log::warn!("keyword request {index} attempt {attempt}: {e}"),
        }
    }
    Keywords::Sentinel
}

/// Where transcripts of a run are stored.
pub fn transcript_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.transcript.jsonl"))
}
