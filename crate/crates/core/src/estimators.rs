//! The five belief estimators.
//!
//! Each estimator is split into a request builder and a pure scoring
//! function over the returned trace(s), so saved traces can be re-scored
//! without touching the endpoint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{ChatRequest, Client, DEFAULT_TOP_LOGPROBS};
use crate::error::{Error, Result};
use crate::grading::normalize_answer;
use crate::prompts::{PromptKind, PromptVars};
use crate::types::{GenerationTrace, RoleTag, SamplingParams};

/// Default number of consistency samples.
pub const DEFAULT_CONSISTENCY_N: u32 = 10;

/// exp(mean token logprob), i.e. the reciprocal of perplexity.
pub fn raw_logits_belief(trace: &GenerationTrace) -> Result<f64> {
    logprob_mean_exp(trace.token_logprobs.iter().map(|t| t.logprob)).ok_or_else(|| {
        Error::Data(format!(
            "missing logprobs for {} {}",
            trace.item_id, trace.role_tag
        ))
    })
}

fn logprob_mean_exp(lps: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = lps.fold((0.0f64, 0usize), |(s, n), lp| (s + lp, n + 1));
    (n > 0).then(|| (sum / n as f64).exp())
}

/// Share of answers equal to the modal answer, plus that answer.
///
/// Ties for the mode go to the lexicographically smallest answer.
pub fn agreement_belief<S: AsRef<str>>(answers: &[S]) -> Result<(f64, String)> {
    if answers.is_empty() {
        return Err(Error::Contract("agreement needs at least one answer".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a.as_ref()).or_default() += 1;
    }
    let (modal, count) = counts
        .iter()
        .fold(None::<(&str, usize)>, |best, (&a, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((a, c)),
        })
        .unwrap();
    Ok((count as f64 / answers.len() as f64, modal.to_string()))
}

/// Agreement over consistency traces, normalizing each answer first.
pub fn agreement_from_traces(traces: &[GenerationTrace]) -> Option<f64> {
    if traces.len() < 2 {
        return None;
    }
    let answers: Vec<String> = traces
        .iter()
        .map(|t| normalize_answer(&t.output_text).canonical)
        .collect();
    agreement_belief(&answers).ok().map(|(s, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PTrueSource {
    /// Both variants visible at the first position.
    Pair,
    /// Only one variant visible; the other is taken as probability zero.
    SingleVariant,
    /// No variant visible; decided from the output text.
    TextFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PTrueScore {
    pub score: f64,
    pub source: PTrueSource,
}

fn variant_of(token: &str) -> Option<bool> {
    let t = token.trim().to_lowercase();
    if t.starts_with("true") {
        Some(true)
    } else if t.starts_with("false") {
        Some(false)
    } else {
        None
    }
}

/// p_T / (p_T + p_F) at the first generated position.
///
/// Each side uses its best-scoring variant ("True", " true", "TRUE", ...)
/// among the chosen token and its top alternatives.
pub fn p_true_from_trace(trace: &GenerationTrace) -> Option<PTrueScore> {
    let mut best_true: Option<f64> = None;
    let mut best_false: Option<f64> = None;
    if let Some(first) = trace.token_logprobs.first() {
        let candidates = std::iter::once((first.token.as_str(), first.logprob)).chain(
            first
                .top_alternatives
                .iter()
                .map(|(t, lp)| (t.as_str(), *lp)),
        );
        for (tok, lp) in candidates {
            let slot = match variant_of(tok) {
                Some(true) => &mut best_true,
                Some(false) => &mut best_false,
                None => continue,
            };
            if slot.map_or(true, |b| lp > b) {
                *slot = Some(lp);
            }
        }
    }
    match (best_true, best_false) {
        (Some(t), Some(f)) => {
            // shift by the max for stability; the pair softmax is unchanged
            let m = t.max(f);
            let (pt, pf) = ((t - m).exp(), (f - m).exp());
            Some(PTrueScore {
                score: pt / (pt + pf),
                source: PTrueSource::Pair,
            })
        }
        (Some(_), None) => Some(PTrueScore {
            score: 1.0,
            source: PTrueSource::SingleVariant,
        }),
        (None, Some(_)) => Some(PTrueScore {
            score: 0.0,
            source: PTrueSource::SingleVariant,
        }),
        (None, None) => variant_of(&trace.output_text).map(|v| PTrueScore {
            score: if v { 1.0 } else { 0.0 },
            source: PTrueSource::TextFallback,
        }),
    }
}

const CONFIDENCE_KEYWORDS: [&str; 3] = ["confidence", "confident", "certainty"];

/// (start byte, end byte, value) for every unsigned decimal number in `text`.
fn numbers(text: &str) -> Vec<(usize, usize, f64)> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i].is_ascii_digit() {
            let start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if let Ok(v) = text[start..i].parse::<f64>() {
                out.push((start, i, v));
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Location and value of the confidence statement in `text`, if any.
fn find_confidence(text: &str) -> Option<(usize, f64)> {
    let nums = numbers(text);
    let percent = nums.iter().rev().find(|(_, end, _)| {
        text[*end..].trim_start().starts_with('%')
    });
    if let Some(&(start, _, v)) = percent {
        return Some((start, v));
    }
    let lower = text.to_ascii_lowercase();
    let first_kw = CONFIDENCE_KEYWORDS
        .iter()
        .filter_map(|k| lower.find(k))
        .min()?;
    nums.iter()
        .rev()
        .find(|(start, _, v)| *start > first_kw && (0.0..=100.0).contains(v))
        .map(|&(_, _, v)| (first_kw, v))
}

/// Stated confidence as a fraction in [0, 1].
///
/// Prefers the last number followed by `%`; otherwise the last number in
/// [0, 100] after a confidence keyword.
pub fn parse_confidence(text: &str) -> Option<f64> {
    find_confidence(text).map(|(_, v)| (v / 100.0).clamp(0.0, 1.0))
}

/// The answer part of a one-stage verbalized response, without its confidence.
pub fn verb_1s_answer(text: &str) -> String {
    let cut = match find_confidence(text) {
        Some((pos, _)) => {
            let lower = text.to_ascii_lowercase();
            // start the cut at a keyword preceding the number, if one is close by
            CONFIDENCE_KEYWORDS
                .iter()
                .filter_map(|k| lower[..pos].rfind(k))
                .max()
                .filter(|k| text[*k..pos].len() <= 24)
                .unwrap_or(pos)
        }
        None => text.len(),
    };
    let head = text[..cut]
        .trim_end_matches(|c: char| c.is_whitespace() || "([{:-,;".contains(c))
        .trim();
    let head = head
        .strip_prefix("Answer:")
        .or_else(|| head.strip_prefix("answer:"))
        .unwrap_or(head)
        .trim();
    if head.is_empty() {
        text.trim().to_string()
    } else {
        head.to_string()
    }
}

/// Text of the shared greedy answer that the other estimators evaluate.
pub fn answer_text(trace: &GenerationTrace) -> String {
    trace.output_text.trim().to_string()
}

pub fn answer_request(item_id: &str, question: &str) -> Result<ChatRequest> {
    let msgs = PromptKind::Logits
        .template()
        .render(&PromptVars::question(question))?;
    Ok(ChatRequest::greedy(item_id, RoleTag::Answer, msgs).with_logprobs(DEFAULT_TOP_LOGPROBS))
}

pub fn p_true_request(item_id: &str, question: &str, answer: &str) -> Result<ChatRequest> {
    let msgs = PromptKind::PTrue.template().render(&PromptVars {
        question,
        answer: Some(answer),
        ..Default::default()
    })?;
    Ok(ChatRequest::greedy(item_id, RoleTag::PTrue, msgs).with_logprobs(DEFAULT_TOP_LOGPROBS))
}

pub fn consistency_request(item_id: &str, question: &str, n: u32, seed: Option<u64>) -> Result<ChatRequest> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "consistency needs at least 2 samples, got {n}"
        )));
    }
    let msgs = PromptKind::Consistency
        .template()
        .render(&PromptVars::question(question))?;
    Ok(ChatRequest::greedy(item_id, RoleTag::ConsistencySample, msgs)
        .with_sampling(SamplingParams::consistency(n, seed)))
}

pub fn verb_1s_request(item_id: &str, question: &str) -> Result<ChatRequest> {
    let msgs = PromptKind::Verb1s
        .template()
        .render(&PromptVars::question(question))?;
    Ok(ChatRequest::greedy(item_id, RoleTag::Verb1s, msgs))
}

pub fn verb_2s_request(item_id: &str, question: &str, previous_answer: &str) -> Result<ChatRequest> {
    let msgs = PromptKind::Verb2s.template().render(&PromptVars {
        question,
        previous_answer: Some(previous_answer),
        ..Default::default()
    })?;
    Ok(ChatRequest::greedy(item_id, RoleTag::Verb2s, msgs))
}

/// Asks the model to judge `answer` and scores the first generated token.
pub fn p_true_belief(
    client: &Client,
    item_id: &str,
    question: &str,
    answer: &str,
) -> Result<(GenerationTrace, Option<PTrueScore>)> {
    let trace = client.complete(&p_true_request(item_id, question, answer)?)?;
    let score = p_true_from_trace(&trace);
    Ok((trace, score))
}

/// One-stage verbalized confidence: (trace, extracted answer, confidence).
pub fn verb_1s_belief(
    client: &Client,
    item_id: &str,
    question: &str,
) -> Result<(GenerationTrace, String, Option<f64>)> {
    let trace = client.complete(&verb_1s_request(item_id, question)?)?;
    let answer = verb_1s_answer(&trace.output_text);
    let conf = parse_confidence(&trace.output_text);
    Ok((trace, answer, conf))
}

pub fn verb_2s_belief(
    client: &Client,
    item_id: &str,
    question: &str,
    previous_answer: &str,
) -> Result<(GenerationTrace, Option<f64>)> {
    let trace = client.complete(&verb_2s_request(item_id, question, previous_answer)?)?;
    let conf = parse_confidence(&trace.output_text);
    Ok((trace, conf))
}

/// `n` sampled answers to the consistency prompt, in one request.
pub fn consistency_samples(
    client: &Client,
    item_id: &str,
    question: &str,
    n: u32,
    seed: Option<u64>,
) -> Result<Vec<GenerationTrace>> {
    client.complete_n(&consistency_request(item_id, question, n, seed)?)
}
