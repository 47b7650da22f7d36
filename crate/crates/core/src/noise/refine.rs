//! Removes training samples that share an answer with, or closely resemble,
//! known delusion examples.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::{cosine_similarity, Embedder, EmbeddingVector};
use super::ChatRecord;
use crate::error::{Error, Result};
use crate::grading::normalize_answer;

const EMBED_BATCH: usize = 64;

/// A known delusion: its question and the answer it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelusionExample {
    pub id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    AnswerMatch,
    Similarity,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trigger::AnswerMatch => "answer_match",
            Trigger::Similarity => "similarity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub record_id: String,
    pub trigger: Trigger,
    pub matched_delusion_id: String,
    /// Highest similarity to a delusion question; absent for answer matches.
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub kept: Vec<ChatRecord>,
    pub removals: Vec<Removal>,
}

/// Refinement stopped early; `removals` covers the first `processed` records.
#[derive(Debug)]
pub struct RefineFailure {
    pub processed: usize,
    pub removals: Vec<Removal>,
    pub error: Error,
}

impl fmt::Display for RefineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "refinement stopped after {} records: {}", self.processed, self.error)
    }
}

impl std::error::Error for RefineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn embed_text(question: &str, answer: &str, embed_qa: bool) -> String {
    if embed_qa {
        format!("{question} {answer}")
    } else {
        question.to_string()
    }
}

/// Drops every record whose canonical answer equals a delusion's, or whose
/// embedding similarity to any delusion is strictly above `sim_threshold`.
pub fn dedup_refine(
    records: &[ChatRecord],
    delusions: &[DelusionExample],
    embedder: &dyn Embedder,
    sim_threshold: f64,
    embed_qa: bool,
) -> std::result::Result<Refined, RefineFailure> {
    let fail = |processed, removals, error| RefineFailure {
        processed,
        removals,
        error,
    };
    if delusions.is_empty() {
        return Err(fail(0, vec![], Error::Contract("no delusion examples to refine against".into())));
    }
    let delusion_answers: Vec<String> = delusions.iter().map(|d| normalize_answer(&d.answer).canonical).collect();
    let delusion_texts: Vec<String> = delusions
        .iter()
        .map(|d| embed_text(&d.question, &d.answer, embed_qa))
        .collect();
    let delusion_vecs: Vec<EmbeddingVector> = match embed_batched(embedder, &delusion_texts) {
        Ok(v) => v,
        Err(e) => return Err(fail(0, vec![], e)),
    };

    let mut kept = Vec::new();
    let mut removals = Vec::new();
    for (chunk_no, chunk) in records.chunks(EMBED_BATCH).enumerate() {
        let processed = chunk_no * EMBED_BATCH;
        let mut need_embed = Vec::new();
        let mut decided: Vec<Option<Removal>> = Vec::with_capacity(chunk.len());
        for (j, r) in chunk.iter().enumerate() {
            let canon = normalize_answer(r.answer()).canonical;
            match delusion_answers.iter().position(|a| !a.is_empty() && *a == canon) {
                Some(k) => decided.push(Some(Removal {
                    record_id: r.meta.id.clone(),
                    trigger: Trigger::AnswerMatch,
                    matched_delusion_id: delusions[k].id.clone(),
                    similarity: None,
                })),
                None => {
                    decided.push(None);
                    need_embed.push(j);
                }
            }
        }
        if !need_embed.is_empty() {
            let texts: Vec<String> = need_embed
                .iter()
                .map(|&j| embed_text(&chunk[j].meta.question, chunk[j].answer(), embed_qa))
                .collect();
            let vecs = match embedder.embed(&texts) {
                Ok(v) if v.len() == texts.len() => v,
                Ok(v) => {
                    let e = Error::Data(format!("embedder returned {} vectors for {} texts", v.len(), texts.len()));
                    return Err(fail(processed, removals, e));
                }
                Err(e) => return Err(fail(processed, removals, e)),
            };
            for (&j, v) in need_embed.iter().zip(&vecs) {
                let mut best: Option<(usize, f64)> = None;
                for (k, d) in delusion_vecs.iter().enumerate() {
                    let s = match cosine_similarity(v, d) {
                        Ok(s) => s,
                        Err(e) => {
                            let e = Error::Data(format!("record {}: {e}", chunk[j].meta.id));
                            return Err(fail(processed, removals, e));
                        }
                    };
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((k, s));
                    }
                }
                if let Some((k, s)) = best.filter(|(_, s)| *s > sim_threshold) {
                    decided[j] = Some(Removal {
                        record_id: chunk[j].meta.id.clone(),
                        trigger: Trigger::Similarity,
                        matched_delusion_id: delusions[k].id.clone(),
                        similarity: Some(s),
                    });
                }
            }
        }
        for (r, d) in chunk.iter().zip(decided) {
            match d {
                Some(rem) => removals.push(rem),
                None => kept.push(r.clone()),
            }
        }
    }
    Ok(Refined { kept, removals })
}

fn embed_batched(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_BATCH) {
        let v = embedder.embed(chunk)?;
        if v.len() != chunk.len() {
            return Err(Error::Data(format!("embedder returned {} vectors for {} texts", v.len(), chunk.len())));
        }
        out.extend(v);
    }
    Ok(out)
}

/// Writes the removal report as CSV.
pub fn save_removals(removals: &[Removal], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["record_id", "trigger", "matched_delusion_id", "similarity"]).map_err(err)?;
    for r in removals {
        let sim = r.similarity.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([r.record_id.as_str(), &r.trigger.to_string(), &r.matched_delusion_id, &sim])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
