//! Audit orchestration: collect traces, score beliefs, threshold, classify.
//!
//! Collection talks to the endpoint; scoring is a pure function of the saved
//! traces, so a finished run can be re-scored under different options
//! without any network calls.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::calibrate::{self, ScoredItem, ThresholdSpec};
use crate::client::{ChatRequest, Client};
use crate::error::{Error, Result};
use crate::estimators::{self, PTrueSource};
use crate::grading::Grader;
use crate::prompts::{PromptKind, PromptVars};
use crate::protocols;
use crate::types::{
    AuditRecord, BeliefVector, ChatMessage, Classification, GenerationTrace, Method, Outcome, QAItem,
    RoleTag, ScoreKey, Verdict,
};

/// What an audit scores and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditOptions {
    pub methods: Vec<Method>,
    /// Methods averaged into the ensemble; `None` disables it.
    pub ensemble_methods: Option<Vec<Method>>,
    /// Threshold and ensemble over rank-normalized scores (true) or raw ones.
    pub normalized: bool,
    pub consistency_n: u32,
    pub seed: u64,
    pub parallelism: usize,
    /// Grade verb_1s against the answer it states itself rather than the greedy answer.
    pub verb1s_own_answer: bool,
    /// Answer with the retrieval prompt over each item's passages.
    pub rag: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            methods: vec![Method::RawLogits],
            ensemble_methods: None,
            normalized: true,
            consistency_n: estimators::DEFAULT_CONSISTENCY_N,
            seed: 0,
            parallelism: 8,
            verb1s_own_answer: false,
            rag: false,
        }
    }
}

impl AuditOptions {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        if let Some(ens) = &self.ensemble_methods {
            if ens.is_empty() {
                return Err(Error::Config("ensemble needs at least one method".into()));
            }
        }
        if self.scored_methods().contains(&Method::Agreement) && self.consistency_n < 2 {
            return Err(Error::Config(format!(
                "agreement needs consistency_n >= 2, got {}",
                self.consistency_n
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    /// Every method that needs a score: requested ones plus ensemble members.
    pub fn scored_methods(&self) -> Vec<Method> {
        let mut set: BTreeSet<Method> = self.methods.iter().copied().collect();
        if let Some(ens) = &self.ensemble_methods {
            set.extend(ens.iter().copied());
        }
        Method::ALL.into_iter().filter(|m| set.contains(m)).collect()
    }

    /// The key whose verdict becomes each record's primary verdict.
    pub fn primary_key(&self) -> ScoreKey {
        match self.ensemble_methods {
            Some(_) => ScoreKey::Ensemble,
            None => ScoreKey::Method(self.methods[0]),
        }
    }

    /// Method keys in scoring order, then the ensemble if requested.
    pub fn score_keys(&self) -> Vec<ScoreKey> {
        let mut keys: Vec<ScoreKey> = self.scored_methods().into_iter().map(ScoreKey::Method).collect();
        if self.ensemble_methods.is_some() {
            keys.push(ScoreKey::Ensemble);
        }
        keys
    }
}

/// One item with every trace collected for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTraces {
    pub item: QAItem,
    pub traces: Vec<GenerationTrace>,
}

/// Result of trace collection: finished items and per-item failures.
#[derive(Debug, Default)]
pub struct Collected {
    pub done: Vec<ItemTraces>,
    pub failed: Vec<(String, Error)>,
}

/// The greedy answer request for an item under `opts`.
pub fn answer_request(item: &QAItem, opts: &AuditOptions) -> Result<ChatRequest> {
    let mut req = if opts.rag {
        protocols::rag_request(item)?
    } else {
        estimators::answer_request(&item.id, &item.question)?
    };
    if !opts.scored_methods().contains(&Method::RawLogits) {
        req.want_logprobs = false;
        req.top_logprobs = 0;
    }
    Ok(req)
}

/// Requests that need the answer text (or nothing) from stage one.
fn follow_up_requests(item: &QAItem, answer: &str, opts: &AuditOptions) -> Result<Vec<ChatRequest>> {
    let mut out = Vec::new();
    for m in opts.scored_methods() {
        match m {
            Method::RawLogits => {}
            Method::PTrue => out.push(estimators::p_true_request(&item.id, &item.question, answer)?),
            Method::Agreement => out.push(estimators::consistency_request(
                &item.id,
                &item.question,
                opts.consistency_n,
                Some(opts.seed),
            )?),
            Method::Verb1s => out.push(estimators::verb_1s_request(&item.id, &item.question)?),
            Method::Verb2s => out.push(estimators::verb_2s_request(&item.id, &item.question, answer)?),
        }
    }
    Ok(out)
}

/// Queries the endpoint for every trace the requested methods need.
///
/// Items whose requests fail land in `failed` with the error; the rest are
/// complete and can be scored.
pub fn collect_traces(client: &Client, items: &[QAItem], opts: &AuditOptions) -> Result<Collected> {
    opts.validate()?;
    let answer_reqs = items
        .iter()
        .map(|i| answer_request(i, opts))
        .collect::<Result<Vec<_>>>()?;
    let answers = client.complete_batch(&answer_reqs, opts.parallelism);

    let mut per_item: Vec<Option<Vec<GenerationTrace>>> = Vec::with_capacity(items.len());
    let mut failed: BTreeMap<usize, Error> = BTreeMap::new();
    let mut follow = Vec::new();
    let mut owner = Vec::new();
    for (i, (item, res)) in items.iter().zip(answers).enumerate() {
        match res.and_then(|mut t| t.drain(..).next().ok_or_else(|| Error::Data("no answer choice".into()))) {
            Ok(trace) => {
                let answer = estimators::answer_text(&trace);
                for req in follow_up_requests(item, &answer, opts)? {
                    follow.push(req);
                    owner.push(i);
                }
                per_item.push(Some(vec![trace]));
            }
            Err(e) => {
                failed.insert(i, e);
                per_item.push(None);
            }
        }
    }

    for (res, i) in client.complete_batch(&follow, opts.parallelism).into_iter().zip(owner) {
        match res {
            Ok(traces) => {
                if let Some(v) = per_item[i].as_mut() {
                    v.extend(traces);
                }
            }
            Err(e) => {
                per_item[i] = None;
                failed.entry(i).or_insert(e);
            }
        }
    }

    let mut out = Collected::default();
    for (i, (item, traces)) in items.iter().zip(per_item).enumerate() {
        match traces {
            Some(traces) => out.done.push(ItemTraces {
                item: item.clone(),
                traces,
            }),
            None => {
                let e = failed.remove(&i).expect("failed item has an error");
                out.failed.push((item.id.clone(), e));
            }
        }
    }
    Ok(out)
}

/// Scored and classified run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRun {
    pub records: Vec<AuditRecord>,
    pub thresholds: Vec<ThresholdSpec>,
    /// Keys with no Correct scored item; their Incorrect verdicts stay pending.
    pub undefined: Vec<ScoreKey>,
}

impl ScoredRun {
    pub fn threshold(&self, key: ScoreKey) -> Option<&ThresholdSpec> {
        self.thresholds.iter().find(|t| t.key == key)
    }
}

fn raw_belief(item_id: &str, traces: &[GenerationTrace], methods: &[Method]) -> BeliefVector {
    let mut b = BeliefVector::new(item_id);
    let first = |tag: RoleTag| traces.iter().find(|t| t.role_tag == tag);
    for &m in methods {
        let score = match m {
            Method::RawLogits => traces
                .iter()
                .find(|t| t.role_tag.is_answer())
                .and_then(|t| estimators::raw_logits_belief(t).ok()),
            Method::PTrue => first(RoleTag::PTrue)
                .and_then(estimators::p_true_from_trace)
                .map(|p| {
                    if p.source != PTrueSource::Pair {
                        b.fallback.insert(m);
                    }
                    p.score
                }),
            Method::Agreement => {
                let samples: Vec<GenerationTrace> =
                    traces.iter().filter(|t| t.role_tag == RoleTag::ConsistencySample).cloned().collect();
                estimators::agreement_from_traces(&samples)
            }
            Method::Verb1s => first(RoleTag::Verb1s).and_then(|t| estimators::parse_confidence(&t.output_text)),
            Method::Verb2s => first(RoleTag::Verb2s).and_then(|t| estimators::parse_confidence(&t.output_text)),
        };
        match score {
            Some(s) => b.set_raw(m, s),
            None => b.mark_failed(m),
        }
    }
    b
}

/// Scores, normalizes, thresholds and classifies collected traces.
pub fn score(items: &[ItemTraces], opts: &AuditOptions, grader: &Grader) -> Result<ScoredRun> {
    opts.validate()?;
    let methods = opts.scored_methods();

    let mut outcomes = Vec::with_capacity(items.len());
    let mut verb1s_outcomes = Vec::with_capacity(items.len());
    let mut beliefs = Vec::with_capacity(items.len());
    for it in items {
        let answer = it
            .traces
            .iter()
            .find(|t| t.role_tag.is_answer())
            .ok_or_else(|| Error::Data(format!("item {}: no answer trace", it.item.id)))?;
        let outcome = grader.grade(&estimators::answer_text(answer), &it.item);
        outcomes.push(outcome);
        let own = it
            .traces
            .iter()
            .find(|t| t.role_tag == RoleTag::Verb1s)
            .filter(|_| opts.verb1s_own_answer)
            .map(|t| grader.grade(&estimators::verb_1s_answer(&t.output_text), &it.item));
        verb1s_outcomes.push(own.unwrap_or(outcome));
        beliefs.push(raw_belief(&it.item.id, &it.traces, &methods));
    }

    let outcome_for = |key: ScoreKey| -> &[Outcome] {
        if key == ScoreKey::Method(Method::Verb1s) {
            &verb1s_outcomes
        } else {
            &outcomes
        }
    };

    for &m in &methods {
        calibrate::normalize_method(&mut beliefs, outcome_for(ScoreKey::Method(m)), m)?;
    }
    if let Some(ens) = &opts.ensemble_methods {
        calibrate::ensemble(&mut beliefs, ens, opts.normalized)?;
    }

    let mut verdicts: Vec<BTreeMap<ScoreKey, Verdict>> = vec![BTreeMap::new(); items.len()];
    let mut thresholds = Vec::new();
    let mut undefined = Vec::new();
    for key in opts.score_keys() {
        let outs = outcome_for(key);
        let scored: Vec<ScoredItem<'_>> = items
            .iter()
            .zip(&beliefs)
            .zip(outs)
            .map(|((it, b), o)| ScoredItem {
                item_id: &it.item.id,
                outcome: *o,
                score: match key {
                    ScoreKey::Ensemble => b.ensemble,
                    ScoreKey::Method(m) if opts.normalized => b.normalized_score(m),
                    ScoreKey::Method(m) => b.raw_score(m),
                },
            })
            .collect();
        match calibrate::belief_threshold(&scored, key, opts.normalized) {
            Ok(spec) => {
                for (slot, v) in verdicts.iter_mut().zip(calibrate::classify(&scored, &spec)) {
                    slot.insert(key, v);
                }
                thresholds.push(spec);
            }
            Err(Error::ThresholdUndefined(_)) => {
                log::warn!("no correct scored answers for {key}; leaving its errors unclassified");
                for (slot, s) in verdicts.iter_mut().zip(&scored) {
                    let mut v = Verdict::pending(s.item_id, s.outcome);
                    v.belief_used = s.score;
                    slot.insert(key, v);
                }
                undefined.push(key);
            }
            Err(e) => return Err(e),
        }
    }

    let primary = opts.primary_key();
    let records = items
        .iter()
        .zip(beliefs)
        .zip(verdicts)
        .map(|((it, belief), method_verdicts)| AuditRecord {
            item: it.item.clone(),
            traces: it.traces.clone(),
            belief,
            verdict: method_verdicts[&primary].clone(),
            method_verdicts,
        })
        .collect();
    Ok(ScoredRun {
        records,
        thresholds,
        undefined,
    })
}

/// Re-scores saved records from their traces alone.
pub fn rescore(records: &[AuditRecord], opts: &AuditOptions, grader: &Grader) -> Result<ScoredRun> {
    let items: Vec<ItemTraces> = records
        .iter()
        .map(|r| ItemTraces {
            item: r.item.clone(),
            traces: r.traces.clone(),
        })
        .collect();
    score(&items, opts, grader)
}

/// Counts of each classification under one key.
pub fn count_classes(records: &[AuditRecord], key: ScoreKey) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        let name = match r.verdict_for(key).map(|v| v.classification) {
            Some(Classification::Delusion) => "delusion",
            Some(Classification::Hallucination) => "hallucination",
            Some(Classification::Pending) => "pending",
            Some(Classification::None) => "none",
            None => "missing",
        };
        *out.entry(name).or_default() += 1;
    }
    out
}

/// A prompt the run would send, for dry runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedPrompt {
    pub item_id: String,
    pub prompt: String,
    pub messages: Vec<ChatMessage>,
}

/// Every audit prompt for `items`, leaving answer placeholders that depend
/// on the model's first response unfilled.
pub fn planned_prompts(items: &[QAItem], opts: &AuditOptions) -> Result<Vec<PlannedPrompt>> {
    opts.validate()?;
    let mut out = Vec::new();
    for item in items {
        let answer_kind = if opts.rag { PromptKind::Rag } else { PromptKind::Logits };
        out.push(PlannedPrompt {
            item_id: item.id.clone(),
            prompt: answer_kind.name(),
            messages: answer_request(item, opts)?.messages,
        });
        for m in opts.scored_methods() {
            if m == Method::RawLogits {
                continue;
            }
            let kind = PromptKind::for_method(m);
            out.push(PlannedPrompt {
                item_id: item.id.clone(),
                prompt: kind.name(),
                messages: kind.template().render_partial(&PromptVars::question(&item.question)),
            });
        }
    }
    Ok(out)
}

/// Plain-text dump of planned prompts, one block per prompt.
pub fn format_prompts(prompts: &[PlannedPrompt]) -> String {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&format!("=== {} {}\n", p.item_id, p.prompt));
        for m in &p.messages {
            out.push_str(&format!("--- {}\n{}\n", m.role.as_str(), m.content));
        }
    }
    out
}
