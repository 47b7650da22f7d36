//! Rank normalization, belief thresholds and delusion classification.
//!
//! Scores from different estimators live on different scales, so each method
//! is first mapped to average-rank / N over the run. The belief threshold is
//! the mean score of the correctly answered items; an incorrect answer whose
//! score is strictly above it is a delusion, anything else incorrect is an
//! ordinary hallucination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BeliefVector, Classification, Method, Outcome, ScoreKey, Verdict};

/// Maps each score to average_rank / N, ranking ascending (rank 1 = lowest).
/// Tied scores share the mean of their rank block.
pub fn rank_normalize<K: Ord + Clone>(scores: &BTreeMap<K, f64>) -> Result<BTreeMap<K, f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("rank_normalize needs at least one score".into()));
    }
    if let Some(v) = scores.values().find(|v| v.is_nan()) {
        return Err(Error::Contract(format!("cannot rank score {v}")));
    }
    let mut sorted: Vec<(&K, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));

    let n = sorted.len() as f64;
    let mut out = BTreeMap::new();
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end].1 == sorted[start].1 {
            end += 1;
        }
        // ranks start+1 ..= end, averaged
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        for (k, _) in &sorted[start..end] {
            out.insert((*k).clone(), avg_rank / n);
        }
        start = end;
    }
    Ok(out)
}

/// The threshold for one method (or the ensemble) in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    #[serde(rename = "method")]
    pub key: ScoreKey,
    pub threshold: f64,
    pub n_correct_used: usize,
    pub normalized: bool,
}

/// The view of one item that thresholding and classification need.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem<'a> {
    pub item_id: &'a str,
    pub outcome: Outcome,
    pub score: Option<f64>,
}

/// Mean score over Correct items that carry a score.
pub fn belief_threshold(items: &[ScoredItem<'_>], key: ScoreKey, normalized: bool) -> Result<ThresholdSpec> {
    let (sum, n) = items
        .iter()
        .filter(|i| i.outcome == Outcome::Correct)
        .filter_map(|i| i.score)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::ThresholdUndefined(key.to_string()));
    }
    Ok(ThresholdSpec {
        key,
        threshold: sum / n as f64,
        n_correct_used: n,
        normalized,
    })
}

/// Verdict for one item under `spec`.
pub fn classify_one(item: &ScoredItem<'_>, spec: &ThresholdSpec) -> Verdict {
    let classification = match item.outcome {
        Outcome::Correct | Outcome::Rejected => Classification::None,
        Outcome::Incorrect => match item.score {
            Some(b) if b > spec.threshold => Classification::Delusion,
            _ => Classification::Hallucination,
        },
    };
    Verdict {
        item_id: item.item_id.to_string(),
        outcome: item.outcome,
        classification,
        belief_used: item.score,
        threshold_used: Some(spec.threshold),
    }
}

pub fn classify(items: &[ScoredItem<'_>], spec: &ThresholdSpec) -> Vec<Verdict> {
    items.iter().map(|i| classify_one(i, spec)).collect()
}

/// Per-item ensemble score over the available requested methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleScore {
    pub score: Option<f64>,
    /// Fewer than all requested methods were available.
    pub partial: bool,
}

/// Mean of the requested methods' scores for one item.
pub fn ensemble_score(belief: &BeliefVector, methods: &[Method], use_normalized: bool) -> EnsembleScore {
    let vals: Vec<f64> = methods
        .iter()
        .filter_map(|m| {
            if use_normalized {
                belief.normalized_score(*m)
            } else {
                belief.raw_score(*m)
            }
        })
        .collect();
    if vals.is_empty() {
        return EnsembleScore {
            score: None,
            partial: true,
        };
    }
    EnsembleScore {
        score: Some(vals.iter().sum::<f64>() / vals.len() as f64),
        partial: vals.len() < methods.len(),
    }
}

/// Writes ensemble scores into every belief vector and returns them in order.
pub fn ensemble(beliefs: &mut [BeliefVector], methods: &[Method], use_normalized: bool) -> Result<Vec<Option<f64>>> {
    if methods.is_empty() {
        return Err(Error::Contract("ensemble needs at least one method".into()));
    }
    Ok(beliefs
        .iter_mut()
        .map(|b| {
            let e = ensemble_score(b, methods, use_normalized);
            b.ensemble = e.score;
            b.ensemble_partial = e.score.is_some() && e.partial;
            e.score
        })
        .collect())
}

/// Rank-normalizes one method across a run, writing into `normalized`.
///
/// Rejected items carry no answer belief and stay out of the pool, as do
/// items without a score for the method.
pub fn normalize_method(beliefs: &mut [BeliefVector], outcomes: &[Outcome], method: Method) -> Result<()> {
    let pool: BTreeMap<usize, f64> = beliefs
        .iter()
        .zip(outcomes)
        .enumerate()
        .filter(|(_, (_, o))| **o != Outcome::Rejected)
        .filter_map(|(i, (b, _))| b.raw_score(method).map(|s| (i, s)))
        .collect();
    let ranked = if pool.is_empty() {
        BTreeMap::new()
    } else {
        rank_normalize(&pool)?
    };
    for (i, b) in beliefs.iter_mut().enumerate() {
        b.normalized.insert(method, ranked.get(&i).copied());
    }
    Ok(())
}
