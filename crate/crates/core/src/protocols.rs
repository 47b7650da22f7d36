//! Behavioral experiments on top of a baseline audit: the honesty-prompt
//! battery, reflection, multi-model answer voting and retrieval answering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{run_bounded, ChatRequest, Client, EndpointConfig, DEFAULT_TOP_LOGPROBS};
use crate::error::{Error, Result};
use crate::estimators;
use crate::grading::{contains_tokens, normalize_answer, Grader};
use crate::pipeline::PlannedPrompt;
use crate::prompts::{join_passages, HonestyLevel, HonestyPrompt, PromptKind, PromptVars};
use crate::types::{AuditRecord, Classification, GenerationTrace, Outcome, QAItem, RoleTag, ScoreKey};

/// Passage count the retrieval prompt was designed around.
pub const EXPECTED_PASSAGES: usize = 20;

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

// ---------------------------------------------------------------- RAG

/// Greedy retrieval-prompt request over the item's passages.
pub fn rag_request(item: &QAItem) -> Result<ChatRequest> {
    let passages = match &item.passages {
        Some(p) if !p.is_empty() => p,
        _ => {
            return Err(Error::Contract(format!(
                "item {} has no passages for retrieval answering",
                item.id
            )))
        }
    };
    if passages.len() != EXPECTED_PASSAGES {
        log::warn!(
            "item {} has {} passages (expected {EXPECTED_PASSAGES})",
            item.id,
            passages.len()
        );
    }
    let joined = join_passages(passages);
    let msgs = PromptKind::Rag.template().render(&PromptVars {
        question: &item.question,
        passages: Some(&joined),
        ..Default::default()
    })?;
    Ok(ChatRequest::greedy(&item.id, RoleTag::Rag, msgs).with_logprobs(DEFAULT_TOP_LOGPROBS))
}

pub fn rag_answer(client: &Client, item: &QAItem) -> Result<GenerationTrace> {
    client.complete(&rag_request(item)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RagSummary {
    pub n_items: usize,
    /// Items whose passage count differs from the expected 20.
    pub n_unexpected_passage_count: usize,
}

pub fn rag_summary(items: &[QAItem]) -> RagSummary {
    RagSummary {
        n_items: items.len(),
        n_unexpected_passage_count: items
            .iter()
            .filter(|i| i.passages.as_ref().map_or(0, Vec::len) != EXPECTED_PASSAGES)
            .count(),
    }
}

// ---------------------------------------------------------------- honesty

pub fn honesty_request(item: &QAItem, prompt: &HonestyPrompt) -> Result<ChatRequest> {
    let msgs = PromptKind::Honesty(prompt.level)
        .template()
        .render(&PromptVars::question(&item.question))?;
    Ok(ChatRequest::greedy(&item.id, RoleTag::Honesty, msgs))
}

/// One re-asked item under one honesty prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestyOutcome {
    pub item_id: String,
    pub level: HonestyLevel,
    pub baseline_outcome: Outcome,
    pub baseline_class: Classification,
    /// `None` when the request failed.
    pub outcome: Option<Outcome>,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestyLevelSummary {
    pub level: HonestyLevel,
    pub n_asked: usize,
    pub n_unevaluated: usize,
    pub n_delusion: usize,
    pub delusion_refused: usize,
    pub delusion_refuse_rate: Option<f64>,
    pub n_hallucination: usize,
    pub hallucination_refused: usize,
    pub hallucination_refuse_rate: Option<f64>,
    /// Incorrect answers under this prompt over evaluated items.
    pub error_rate: Option<f64>,
    pub accuracy: Option<f64>,
    pub reject_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestySummary {
    pub method: ScoreKey,
    pub all_items: bool,
    /// Baseline items without a usable label for `method`.
    pub n_skipped: usize,
    pub levels: Vec<HonestyLevelSummary>,
}

/// Baseline items to re-ask, with their labels; `skipped` counts unusable ones.
fn honesty_targets(baseline: &[AuditRecord], key: ScoreKey, all_items: bool) -> (Vec<(&AuditRecord, Classification)>, usize) {
    let mut skipped = 0;
    let mut out = Vec::new();
    for r in baseline {
        let Some(v) = r.verdict_for(key) else {
            skipped += 1;
            continue;
        };
        if v.outcome == Outcome::Incorrect && v.classification == Classification::Pending {
            skipped += 1;
            continue;
        }
        if all_items || v.outcome == Outcome::Incorrect {
            out.push((r, v.classification));
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} baseline items have no usable {key} label and were skipped");
    }
    (out, skipped)
}

/// Tallies refuse rates per baseline class for each prompt level.
pub fn summarize_honesty(outcomes: &[HonestyOutcome]) -> Vec<HonestyLevelSummary> {
    HonestyLevel::ALL
        .iter()
        .filter(|l| outcomes.iter().any(|o| o.level == **l))
        .map(|&level| {
            let rows: Vec<&HonestyOutcome> = outcomes.iter().filter(|o| o.level == level).collect();
            let evaluated: Vec<&&HonestyOutcome> = rows.iter().filter(|o| o.outcome.is_some()).collect();
            let class = |c: Classification| evaluated.iter().filter(|o| o.baseline_class == c).count();
            let refused = |c: Classification| {
                evaluated
                    .iter()
                    .filter(|o| o.baseline_class == c && o.outcome == Some(Outcome::Rejected))
                    .count()
            };
            let now = |x: Outcome| evaluated.iter().filter(|o| o.outcome == Some(x)).count();
            let (nd, nh) = (class(Classification::Delusion), class(Classification::Hallucination));
            let (rd, rh) = (refused(Classification::Delusion), refused(Classification::Hallucination));
            HonestyLevelSummary {
                level,
                n_asked: rows.len(),
                n_unevaluated: rows.len() - evaluated.len(),
                n_delusion: nd,
                delusion_refused: rd,
                delusion_refuse_rate: ratio(rd, nd),
                n_hallucination: nh,
                hallucination_refused: rh,
                hallucination_refuse_rate: ratio(rh, nh),
                error_rate: ratio(now(Outcome::Incorrect), evaluated.len()),
                accuracy: ratio(now(Outcome::Correct), evaluated.len()),
                reject_rate: ratio(now(Outcome::Rejected), evaluated.len()),
            }
        })
        .collect()
}

/// Prompts the battery would send.
pub fn honesty_planned(baseline: &[AuditRecord], key: ScoreKey, all_items: bool) -> Result<Vec<PlannedPrompt>> {
    let (targets, _) = honesty_targets(baseline, key, all_items);
    let mut out = Vec::new();
    for p in HonestyPrompt::all() {
        for (r, _) in &targets {
            out.push(PlannedPrompt {
                item_id: r.item.id.clone(),
                prompt: p.level.tag().into(),
                messages: honesty_request(&r.item, &p)?.messages,
            });
        }
    }
    Ok(out)
}

/// Re-asks baseline errors (or every item) under each honesty prompt.
pub fn honesty_battery(
    client: &Client,
    baseline: &[AuditRecord],
    key: ScoreKey,
    prompts: &[HonestyPrompt],
    all_items: bool,
    grader: &Grader,
    parallelism: usize,
) -> Result<(HonestySummary, Vec<HonestyOutcome>, Vec<GenerationTrace>)> {
    let (targets, skipped) = honesty_targets(baseline, key, all_items);
    let mut reqs = Vec::new();
    let mut meta = Vec::new();
    for p in prompts {
        for (r, class) in &targets {
            reqs.push(honesty_request(&r.item, p)?);
            meta.push((p.level, *r, *class));
        }
    }
    let mut outcomes = Vec::with_capacity(reqs.len());
    let mut traces = Vec::new();
    for (res, (level, r, class)) in client.complete_batch(&reqs, parallelism).into_iter().zip(meta) {
        let baseline_outcome = r.verdict_for(key).map_or(r.verdict.outcome, |v| v.outcome);
        let (outcome, answer) = match res.map(|t| t.into_iter().next()) {
            Ok(Some(t)) => {
                let ans = estimators::answer_text(&t);
                let o = grader.grade(&ans, &r.item);
                traces.push(t);
                (Some(o), Some(ans))
            }
            Ok(None) => (None, None),
            Err(e) => {
                log::warn!("item {} {}: {e}", r.item.id, level);
                (None, None)
            }
        };
        outcomes.push(HonestyOutcome {
            item_id: r.item.id.clone(),
            level,
            baseline_outcome,
            baseline_class: class,
            outcome,
            answer,
        });
    }
    let summary = HonestySummary {
        method: key,
        all_items,
        n_skipped: skipped,
        levels: summarize_honesty(&outcomes),
    };
    Ok((summary, outcomes, traces))
}

// ---------------------------------------------------------------- reflection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionKind {
    Insist,
    RevisedCorrect,
    RevisedIncorrect,
    RevisedReject,
    /// The reflection request failed.
    Unevaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    pub item_id: String,
    pub outcome: ReflectionKind,
    pub previous_answer: String,
    pub baseline_outcome: Outcome,
    pub baseline_class: Classification,
    pub reflection_text: Option<String>,
}

pub fn reflection_request(item: &QAItem, previous_answer: &str) -> Result<ChatRequest> {
    let msgs = PromptKind::Reflection.template().render(&PromptVars {
        question: &item.question,
        previous_answer: Some(previous_answer),
        ..Default::default()
    })?;
    Ok(ChatRequest::greedy(&item.id, RoleTag::Reflection, msgs))
}

/// Insist when the output says "I insist" or restates the previous answer;
/// otherwise the output is graded as a revised answer.
pub fn classify_reflection(output: &str, previous_answer: &str, item: &QAItem, grader: &Grader) -> ReflectionKind {
    let out = normalize_answer(output);
    let prev = normalize_answer(previous_answer);
    let insists = contains_tokens(&out.tokens(), &["i", "insist"]);
    if insists || (!out.canonical.is_empty() && out.canonical == prev.canonical) {
        return ReflectionKind::Insist;
    }
    match grader.grade(output, item) {
        Outcome::Correct => ReflectionKind::RevisedCorrect,
        Outcome::Incorrect => ReflectionKind::RevisedIncorrect,
        Outcome::Rejected => ReflectionKind::RevisedReject,
    }
}

fn previous_answer(r: &AuditRecord) -> Result<String> {
    r.answer_trace()
        .map(estimators::answer_text)
        .ok_or_else(|| Error::Data(format!("item {}: baseline has no answer trace", r.item.id)))
}

pub fn reflect(client: &Client, item: &QAItem, previous_answer: &str, grader: &Grader) -> Result<(ReflectionKind, GenerationTrace)> {
    let trace = client.complete(&reflection_request(item, previous_answer)?)?;
    let kind = classify_reflection(&trace.output_text, previous_answer, item, grader);
    Ok((kind, trace))
}

pub fn reflection_planned(baseline: &[AuditRecord]) -> Result<Vec<PlannedPrompt>> {
    baseline
        .iter()
        .map(|r| {
            Ok(PlannedPrompt {
                item_id: r.item.id.clone(),
                prompt: PromptKind::Reflection.name(),
                messages: reflection_request(&r.item, &previous_answer(r)?)?.messages,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReflectionCounts {
    pub n: usize,
    pub insist: usize,
    pub revised_correct: usize,
    pub revised_incorrect: usize,
    pub revised_reject: usize,
    pub unevaluated: usize,
    pub insist_rate: Option<f64>,
}

impl ReflectionCounts {
    fn tally<'a>(outcomes: impl Iterator<Item = &'a ReflectionOutcome>) -> Self {
        let mut c = Self::default();
        for o in outcomes {
            c.n += 1;
            match o.outcome {
                ReflectionKind::Insist => c.insist += 1,
                ReflectionKind::RevisedCorrect => c.revised_correct += 1,
                ReflectionKind::RevisedIncorrect => c.revised_incorrect += 1,
                ReflectionKind::RevisedReject => c.revised_reject += 1,
                ReflectionKind::Unevaluated => c.unevaluated += 1,
            }
        }
        c.insist_rate = ratio(c.insist, c.n - c.unevaluated);
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReflectionSummary {
    pub overall: ReflectionCounts,
    pub delusion: ReflectionCounts,
    pub hallucination: ReflectionCounts,
}

pub fn summarize_reflection(outcomes: &[ReflectionOutcome]) -> ReflectionSummary {
    let by = |c: Classification| ReflectionCounts::tally(outcomes.iter().filter(move |o| o.baseline_class == c));
    ReflectionSummary {
        overall: ReflectionCounts::tally(outcomes.iter()),
        delusion: by(Classification::Delusion),
        hallucination: by(Classification::Hallucination),
    }
}

/// Reflects on every baseline answer. The baseline records are not touched.
pub fn reflect_all(
    client: &Client,
    baseline: &[AuditRecord],
    grader: &Grader,
    parallelism: usize,
) -> Result<(Vec<ReflectionOutcome>, Vec<GenerationTrace>)> {
    let prev: Vec<String> = baseline.iter().map(previous_answer).collect::<Result<_>>()?;
    let reqs = baseline
        .iter()
        .zip(&prev)
        .map(|(r, p)| reflection_request(&r.item, p))
        .collect::<Result<Vec<_>>>()?;
    let mut outcomes = Vec::with_capacity(reqs.len());
    let mut traces = Vec::new();
    for ((res, r), p) in client.complete_batch(&reqs, parallelism).into_iter().zip(baseline).zip(prev) {
        let (kind, text) = match res.map(|t| t.into_iter().next()) {
            Ok(Some(t)) => {
                let kind = classify_reflection(&t.output_text, &p, &r.item, grader);
                let text = t.output_text.clone();
                traces.push(t);
                (kind, Some(text))
            }
            Ok(None) => (ReflectionKind::Unevaluated, None),
            Err(e) => {
                log::warn!("item {}: reflection failed: {e}", r.item.id);
                (ReflectionKind::Unevaluated, None)
            }
        };
        outcomes.push(ReflectionOutcome {
            item_id: r.item.id.clone(),
            outcome: kind,
            previous_answer: p,
            baseline_outcome: r.verdict.outcome,
            baseline_class: r.verdict.classification,
            reflection_text: text,
        });
    }
    Ok((outcomes, traces))
}

// ---------------------------------------------------------------- voting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub verifiers: Vec<EndpointConfig>,
    pub threshold: usize,
}

impl VoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.verifiers.is_empty() {
            return Err(Error::Config("voting needs at least one verifier".into()));
        }
        if !(1..=self.verifiers.len()).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "vote threshold {} outside [1, {}]",
                self.threshold,
                self.verifiers.len()
            )));
        }
        Ok(())
    }
}

/// Keep iff at least `threshold` verifiers matched.
pub fn keep_answer(matches: &[bool], threshold: usize) -> bool {
    matches.iter().filter(|m| **m).count() >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub item_id: String,
    pub target_answer: String,
    pub kept: bool,
    pub matches: Vec<bool>,
    pub verifier_answers: Vec<Option<String>>,
    /// Verifiers whose request failed (counted as non-matching).
    pub failed: Vec<bool>,
}

pub fn verifier_request(item: &QAItem) -> Result<ChatRequest> {
    let mut req = estimators::answer_request(&item.id, &item.question)?;
    req.role_tag = RoleTag::Verifier;
    req.want_logprobs = false;
    req.top_logprobs = 0;
    Ok(req)
}

/// Asks every verifier the question and checks its answer against `target_answer`.
pub fn vote_verify(
    target_answer: &str,
    item: &QAItem,
    verifiers: &[Client],
    threshold: usize,
    grader: &Grader,
) -> Result<VoteResult> {
    let req = verifier_request(item)?;
    let answers: Vec<Option<String>> = run_bounded(verifiers, verifiers.len(), |c| match c.complete(&req) {
        Ok(t) => Some(estimators::answer_text(&t)),
        Err(e) => {
            log::warn!("item {}: verifier {} failed: {e}", item.id, c.config().model_name);
            None
        }
    });
    let matches: Vec<bool> = answers
        .iter()
        .map(|a| a.as_deref().is_some_and(|a| grader.answers_agree(a, target_answer)))
        .collect();
    Ok(VoteResult {
        item_id: item.id.clone(),
        target_answer: target_answer.to_string(),
        kept: keep_answer(&matches, threshold),
        failed: answers.iter().map(Option::is_none).collect(),
        matches,
        verifier_answers: answers,
    })
}

/// Votes on every answered (non-rejected) baseline item.
pub fn vote_all(
    baseline: &[AuditRecord],
    verifiers: &[Client],
    threshold: usize,
    grader: &Grader,
    parallelism: usize,
) -> Result<Vec<VoteResult>> {
    let targets: Vec<&AuditRecord> = baseline.iter().filter(|r| r.verdict.outcome != Outcome::Rejected).collect();
    let prev: Vec<String> = targets.iter().map(|r| previous_answer(r)).collect::<Result<_>>()?;
    let pairs: Vec<(&AuditRecord, &String)> = targets.into_iter().zip(&prev).collect();
    run_bounded(&pairs, parallelism, |(r, p)| vote_verify(p, &r.item, verifiers, threshold, grader))
        .into_iter()
        .collect()
}

/// Baseline records with discarded answers turned into rejections.
///
/// Thresholds and the surviving classifications are kept as they were.
pub fn apply_votes(baseline: &[AuditRecord], votes: &[VoteResult]) -> Vec<AuditRecord> {
    let discarded: BTreeMap<&str, bool> = votes.iter().map(|v| (v.item_id.as_str(), !v.kept)).collect();
    baseline
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if discarded.get(r.item.id.as_str()).copied().unwrap_or(false) {
                for v in std::iter::once(&mut r.verdict).chain(r.method_verdicts.values_mut()) {
                    v.outcome = Outcome::Rejected;
                    v.classification = Classification::None;
                }
            }
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSummary {
    pub threshold: usize,
    pub n_verifiers: usize,
    pub n_voted: usize,
    pub n_discarded: usize,
    pub n_verifier_failures: usize,
    pub discarded: Vec<String>,
}

pub fn summarize_votes(votes: &[VoteResult], threshold: usize, n_verifiers: usize) -> VoteSummary {
    let discarded: Vec<String> = votes.iter().filter(|v| !v.kept).map(|v| v.item_id.clone()).collect();
    VoteSummary {
        threshold,
        n_verifiers,
        n_voted: votes.len(),
        n_discarded: discarded.len(),
        n_verifier_failures: votes.iter().map(|v| v.failed.iter().filter(|f| **f).count()).sum(),
        discarded,
    }
}

/// Prompt the verifiers are sent, for dry runs.
pub fn verifier_planned(items: &[QAItem]) -> Result<Vec<PlannedPrompt>> {
    items
        .iter()
        .map(|i| {
            Ok(PlannedPrompt {
                item_id: i.id.clone(),
                prompt: PromptKind::Logits.name(),
                messages: verifier_request(i)?.messages,
            })
        })
        .collect()
}
