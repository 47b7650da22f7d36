//! Domain records shared by every stage of an audit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One question from a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passages: Option<Vec<String>>,
    #[serde(default)]
    pub source: String,
}

impl QAItem {
    /// First non-empty alias; the canonical label used when building training data.
    pub fn primary_answer(&self) -> &str {
        self.gold_answers
            .iter()
            .find(|a| !a.trim().is_empty())
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Data("item id is empty".into()));
        }
        if !self.gold_answers.iter().any(|a| !a.trim().is_empty()) {
            return Err(Error::Data(format!(
                "item {} has no non-empty gold answer",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Which step of an audit or protocol produced a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Answer,
    PTrue,
    ConsistencySample,
    #[serde(rename = "verb_1s")]
    Verb1s,
    #[serde(rename = "verb_2s")]
    Verb2s,
    Honesty,
    Reflection,
    Rag,
    Verifier,
}

impl RoleTag {
    /// Tags of traces whose text is the answer that gets graded.
    pub fn is_answer(self) -> bool {
        matches!(self, RoleTag::Answer | RoleTag::Rag)
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RoleTag::Answer => "answer",
            RoleTag::PTrue => "p_true",
            RoleTag::ConsistencySample => "consistency_sample",
            RoleTag::Verb1s => "verb_1s",
            RoleTag::Verb2s => "verb_2s",
            RoleTag::Honesty => "honesty",
            RoleTag::Reflection => "reflection",
            RoleTag::Rag => "rag",
            RoleTag::Verifier => "verifier",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_alternatives: Vec<(String, f64)>,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
            top_alternatives: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables top-k filtering.
    pub top_k: u32,
    pub max_tokens: u32,
    pub n: u32,
    pub seed: Option<u64>,
}

impl SamplingParams {
    /// Deterministic decoding with the 128-token budget used for every greedy call.
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 0,
            max_tokens: 128,
            n: 1,
            seed: None,
        }
    }

    /// Sampling settings for the consistency estimator.
    pub fn consistency(n: u32, seed: Option<u64>) -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.95,
            top_k: 40,
            max_tokens: 128,
            n,
            seed,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Contract(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Contract(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens < 1 || self.n < 1 {
            return Err(Error::Contract("max_tokens and n must be >= 1".into()));
        }
        Ok(())
    }
}

/// One model completion together with the request that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub item_id: String,
    pub role_tag: RoleTag,
    pub prompt_messages: Vec<ChatMessage>,
    pub output_text: String,
    #[serde(default)]
    pub token_logprobs: Vec<TokenLogprob>,
    pub sampling: SamplingParams,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub retries: u32,
    /// Request parameters the endpoint did not accept and that were dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omitted_params: Vec<String>,
}

impl GenerationTrace {
    pub fn check_logprobs(&self) -> Result<()> {
        for t in &self.token_logprobs {
            if !(t.logprob <= 0.0) {
                return Err(Error::Data(format!(
                    "trace {}/{}: token {:?} has logprob {} > 0",
                    self.item_id, self.role_tag, t.token, t.logprob
                )));
            }
        }
        Ok(())
    }

    /// Concatenation of the token strings.
    pub fn token_text(&self) -> String {
        self.token_logprobs.iter().map(|t| t.token.as_str()).collect()
    }
}

/// The five belief estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    RawLogits,
    Agreement,
    PTrue,
    Verb1s,
    Verb2s,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::RawLogits,
        Method::Agreement,
        Method::PTrue,
        Method::Verb1s,
        Method::Verb2s,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::RawLogits => "raw_logits",
            Method::Agreement => "agreement",
            Method::PTrue => "p_true",
            Method::Verb1s => "verb_1s",
            Method::Verb2s => "verb_2s",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "raw_logits" | "logits" => Method::RawLogits,
            "agreement" | "consistency" => Method::Agreement,
            "p_true" => Method::PTrue,
            "verb_1s" => Method::Verb1s,
            "verb_2s" => Method::Verb2s,
            other => return Err(Error::Config(format!("unknown belief method {other:?}"))),
        })
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A single estimator or the ensemble of several; keys per-method results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreKey {
    Method(Method),
    Ensemble,
}

impl fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKey::Method(m) => f.write_str(m.as_str()),
            ScoreKey::Ensemble => f.write_str("ensemble"),
        }
    }
}

impl FromStr for ScoreKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ensemble" {
            Ok(ScoreKey::Ensemble)
        } else {
            s.parse().map(ScoreKey::Method)
        }
    }
}

impl From<Method> for ScoreKey {
    fn from(m: Method) -> Self {
        ScoreKey::Method(m)
    }
}

impl Serialize for ScoreKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScoreKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-method belief scores for one item.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefVector {
    pub item_id: String,
    pub raw: BTreeMap<Method, Option<f64>>,
    #[serde(default)]
    pub normalized: BTreeMap<Method, Option<f64>>,
    #[serde(default)]
    pub ensemble: Option<f64>,
    /// Set when the ensemble averaged fewer methods than were requested.
    #[serde(default)]
    pub ensemble_partial: bool,
    #[serde(default)]
    pub parse_failed: BTreeSet<Method>,
    /// Methods whose score came from a fallback path rather than the primary rule.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub fallback: BTreeSet<Method>,
}

impl BeliefVector {
    pub fn new(item_id: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            ..Self::default()
        }
    }

    pub fn raw_score(&self, method: Method) -> Option<f64> {
        self.raw.get(&method).copied().flatten()
    }

    pub fn normalized_score(&self, method: Method) -> Option<f64> {
        self.normalized.get(&method).copied().flatten()
    }

    pub fn set_raw(&mut self, method: Method, score: f64) {
        self.parse_failed.remove(&method);
        self.raw.insert(method, Some(score));
    }

    pub fn mark_failed(&mut self, method: Method) {
        self.raw.insert(method, None);
        self.parse_failed.insert(method);
    }

    pub fn check(&self) -> Result<()> {
        for (m, v) in &self.raw {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::Data(format!(
                        "item {}: {m} score {v} outside [0, 1]",
                        self.item_id
                    )));
                }
                if self.parse_failed.contains(m) {
                    return Err(Error::Data(format!(
                        "item {}: {m} is parse_failed but carries a score",
                        self.item_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Correct,
    Incorrect,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    None,
    /// Incorrect answer awaiting a threshold.
    Pending,
    Hallucination,
    Delusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub outcome: Outcome,
    pub classification: Classification,
    pub belief_used: Option<f64>,
    pub threshold_used: Option<f64>,
}

impl Verdict {
    /// A graded verdict whose classification has not been decided yet.
    pub fn pending(item_id: impl Into<String>, outcome: Outcome) -> Self {
        let classification = match outcome {
            Outcome::Incorrect => Classification::Pending,
            _ => Classification::None,
        };
        Self {
            item_id: item_id.into(),
            outcome,
            classification,
            belief_used: None,
            threshold_used: None,
        }
    }

    pub fn is_delusion(&self) -> bool {
        self.classification == Classification::Delusion
    }

    pub fn check(&self) -> Result<()> {
        let incorrect = self.outcome == Outcome::Incorrect;
        let classified = self.classification != Classification::None;
        if incorrect != classified {
            return Err(Error::Data(format!(
                "item {}: outcome {:?} with classification {:?}",
                self.item_id, self.outcome, self.classification
            )));
        }
        if self.classification == Classification::Delusion {
            match (self.belief_used, self.threshold_used) {
                (Some(b), Some(t)) if b > t => {}
                _ => {
                    return Err(Error::Data(format!(
                        "item {}: delusion without belief above threshold",
                        self.item_id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Everything known about one audited item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub item: QAItem,
    pub traces: Vec<GenerationTrace>,
    pub belief: BeliefVector,
    /// Verdict under the run's primary method.
    pub verdict: Verdict,
    /// Verdict under every scored method and the ensemble.
    #[serde(default)]
    pub method_verdicts: BTreeMap<ScoreKey, Verdict>,
}

impl AuditRecord {
    /// The greedy answer being graded (a RAG answer in RAG runs).
    pub fn answer_trace(&self) -> Option<&GenerationTrace> {
        self.traces.iter().find(|t| t.role_tag.is_answer())
    }

    pub fn traces_with(&self, tag: RoleTag) -> impl Iterator<Item = &GenerationTrace> {
        self.traces.iter().filter(move |t| t.role_tag == tag)
    }

    pub fn verdict_for(&self, key: ScoreKey) -> Option<&Verdict> {
        self.method_verdicts.get(&key)
    }

    pub fn check(&self) -> Result<()> {
        let answers = self.traces.iter().filter(|t| t.role_tag.is_answer()).count();
        if answers > 1 {
            return Err(Error::Data(format!(
                "item {}: {answers} answer traces",
                self.item.id
            )));
        }
        for t in &self.traces {
            t.check_logprobs()?;
        }
        self.belief.check()?;
        self.verdict.check()?;
        for v in self.method_verdicts.values() {
            v.check()?;
        }
        Ok(())
    }
}
