//! Deterministic in-process backend driven by a script file.
//!
//! Entries are keyed by a fingerprint of the prompt messages plus the
//! sampling mode. Greedy requests always get the entry's first completion;
//! sampled requests walk the completion list cyclically, with one cursor per
//! (fingerprint, seed).

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendChoice, BackendError, BackendResponse, ChatRequest, EndpointConfig};
use crate::error::{Error, Result};
use crate::types::{ChatMessage, TokenLogprob};

/// Hex SHA-256 over the role and content of every message.
pub fn fingerprint(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m.role.as_str().as_bytes());
        h.update([0x1f]);
        h.update(m.content.as_bytes());
        h.update([0x1e]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits text into word pieces that keep their leading whitespace,
/// so the pieces concatenate back to the input exactly.
pub fn mock_tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if in_word {
                out.push(std::mem::take(&mut cur));
                in_word = false;
            }
        } else {
            in_word = true;
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefaultBehavior {
    #[default]
    Error,
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCompletion {
    pub output_text: String,
    #[serde(default)]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

impl ScriptedCompletion {
    /// A completion without log-probabilities.
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            output_text: text.into(),
            token_logprobs: None,
        }
    }

    /// Every word piece of `text` gets the same logprob.
    pub fn uniform(text: impl Into<String>, logprob: f64) -> Self {
        let text = text.into();
        let lps = mock_tokens(&text)
            .into_iter()
            .map(|t| TokenLogprob {
                top_alternatives: vec![(t.clone(), logprob)],
                token: t,
                logprob,
            })
            .collect();
        Self {
            output_text: text,
            token_logprobs: Some(lps),
        }
    }

    pub fn with_token_logprobs(tokens: &[(&str, f64)]) -> Self {
        let lps: Vec<TokenLogprob> = tokens
            .iter()
            .map(|(t, lp)| TokenLogprob {
                token: t.to_string(),
                logprob: *lp,
                top_alternatives: vec![(t.to_string(), *lp)],
            })
            .collect();
        Self {
            output_text: lps.iter().map(|t| t.token.as_str()).collect(),
            token_logprobs: Some(lps),
        }
    }

    /// Explicit per-token logprobs with alternatives.
    pub fn with_logprobs(tokens: Vec<TokenLogprob>) -> Self {
        Self {
            output_text: tokens.iter().map(|t| t.token.as_str()).collect(),
            token_logprobs: Some(tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Either a precomputed fingerprint or the literal messages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub messages: Option<Vec<ChatMessage>>,
    pub mode: SamplingMode,
    #[serde(default)]
    pub completions: Vec<ScriptedCompletion>,
    /// Number of transient failures to emit before succeeding.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_first: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permanent_error: Option<String>,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl ScriptEntry {
    fn key(&self) -> Result<String> {
        match (&self.fingerprint, &self.messages) {
            (Some(f), _) => Ok(f.clone()),
            (None, Some(m)) => Ok(fingerprint(m)),
            (None, None) => Err(Error::Data(
                "mock script entry needs a fingerprint or messages".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub default_behavior: DefaultBehavior,
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn echo() -> Self {
        Self {
            default_behavior: DefaultBehavior::Echo,
            entries: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let script: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("mock script {}: {e}", path.display())))?;
        for e in &script.entries {
            e.key()?;
        }
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("mock script serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn entry_mut(&mut self, messages: &[ChatMessage], mode: SamplingMode) -> &mut ScriptEntry {
        let fp = fingerprint(messages);
        let pos = self
            .entries
            .iter()
            .position(|e| e.mode == mode && e.key().ok().as_deref() == Some(fp.as_str()));
        let idx = match pos {
            Some(i) => i,
            None => {
                self.entries.push(ScriptEntry {
                    fingerprint: Some(fp),
                    messages: None,
                    mode,
                    completions: Vec::new(),
                    fail_first: 0,
                    permanent_error: None,
                });
                self.entries.len() - 1
            }
        };
        &mut self.entries[idx]
    }

    /// Sets the greedy completion for `messages`, replacing any previous one.
    pub fn add_greedy(&mut self, messages: &[ChatMessage], completion: ScriptedCompletion) {
        self.entry_mut(messages, SamplingMode::Greedy).completions = vec![completion];
    }

    /// Sets the cycle of sampled completions for `messages`.
    pub fn add_sampled(&mut self, messages: &[ChatMessage], completions: Vec<ScriptedCompletion>) {
        self.entry_mut(messages, SamplingMode::Sampled).completions = completions;
    }

    pub fn fail_first(&mut self, messages: &[ChatMessage], n: u32) {
        for mode in [SamplingMode::Greedy, SamplingMode::Sampled] {
            if let Some(e) = self.find_mut(messages, mode) {
                e.fail_first = n;
            }
        }
    }

    pub fn fail_permanently(&mut self, messages: &[ChatMessage], message: &str) {
        for mode in [SamplingMode::Greedy, SamplingMode::Sampled] {
            self.entry_mut(messages, mode).permanent_error = Some(message.to_string());
        }
    }

    fn find_mut(&mut self, messages: &[ChatMessage], mode: SamplingMode) -> Option<&mut ScriptEntry> {
        let fp = fingerprint(messages);
        self.entries
            .iter_mut()
            .find(|e| e.mode == mode && e.key().ok().as_deref() == Some(fp.as_str()))
    }
}

/// Fixed clock reading for every mock completion.
pub fn mock_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub struct MockBackend {
    entries: HashMap<(String, SamplingMode), ScriptEntry>,
    default_behavior: DefaultBehavior,
    cursors: Mutex<HashMap<(String, Option<u64>), usize>>,
    attempts: Mutex<HashMap<(String, SamplingMode), u32>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
    delays: Option<(Mutex<ChaCha8Rng>, Range<u64>)>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let mut entries = HashMap::new();
        for e in script.entries {
            if let Ok(k) = e.key() {
                entries.insert((k, e.mode), e);
            }
        }
        Self {
            entries,
            default_behavior: script.default_behavior,
            cursors: Mutex::new(HashMap::new()),
            attempts: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
            delays: None,
        }
    }

    /// Sleeps a seeded random number of milliseconds in `range_ms` per call.
    pub fn with_random_delays(mut self, seed: u64, range_ms: Range<u64>) -> Self {
        self.delays = Some((Mutex::new(ChaCha8Rng::seed_from_u64(seed)), range_ms));
        self
    }

    /// Highest number of concurrent calls observed so far.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn respond(&self, request: &ChatRequest) -> Result<Vec<ScriptedCompletion>, BackendError> {
        let fp = fingerprint(&request.messages);
        let mode = if request.sampling.is_greedy() {
            SamplingMode::Greedy
        } else {
            SamplingMode::Sampled
        };
        let n = request.sampling.n as usize;

        let Some(entry) = self.entries.get(&(fp.clone(), mode)) else {
            return match self.default_behavior {
                DefaultBehavior::Error => Err(BackendError::Permanent(format!(
                    "mock: no scripted {mode:?} completion for {} {} (fingerprint {})",
                    request.item_id,
                    request.role_tag,
                    &fp[..16]
                ))),
                DefaultBehavior::Echo => {
                    let last = request.messages.last().map(|m| m.content.clone()).unwrap_or_default();
                    Ok(vec![ScriptedCompletion::uniform(last, 0.0); n])
                }
            };
        };

        if let Some(msg) = &entry.permanent_error {
            return Err(BackendError::Permanent(format!("mock: {msg}")));
        }
        if entry.fail_first > 0 {
            let mut attempts = self.attempts.lock().unwrap();
            let seen = attempts.entry((fp.clone(), mode)).or_insert(0);
            if *seen < entry.fail_first {
                *seen += 1;
                return Err(BackendError::Transient(format!(
                    "mock: scripted transient failure {}/{}",
                    seen, entry.fail_first
                )));
            }
        }
        if entry.completions.is_empty() {
            return Err(BackendError::Permanent("mock: entry has no completions".into()));
        }

        match mode {
            SamplingMode::Greedy => Ok(vec![entry.completions[0].clone(); n]),
            SamplingMode::Sampled => {
                let mut cursors = self.cursors.lock().unwrap();
                let cursor = cursors.entry((fp, request.sampling.seed)).or_insert(0);
                let len = entry.completions.len();
                let out = (0..n)
                    .map(|i| entry.completions[(*cursor + i) % len].clone())
                    .collect();
                *cursor = (*cursor + n) % len;
                Ok(out)
            }
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Backend for MockBackend {
    fn chat(&self, _config: &EndpointConfig, request: &ChatRequest) -> Result<BackendResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);

        if let Some((rng, range)) = &self.delays {
            let ms = if range.is_empty() {
                0
            } else {
                rng.lock().unwrap().gen_range(range.clone())
            };
            std::thread::sleep(Duration::from_millis(ms));
        }

        let completions = self.respond(request)?;
        Ok(BackendResponse {
            choices: completions
                .into_iter()
                .map(|c| BackendChoice {
                    text: c.output_text,
                    logprobs: c.token_logprobs,
                })
                .collect(),
            omitted_params: Vec::new(),
            created_at: mock_epoch(),
        })
    }

    fn now(&self) -> DateTime<Utc> {
        mock_epoch()
    }
}
