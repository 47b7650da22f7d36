//! Training-data construction: noisy answer synthesis, refusal fine-tuning
//! sets, and embedding-based removal of samples that resemble delusions.

mod embed;
mod refine;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompts::{PromptKind, PromptVars};
use crate::types::{AuditRecord, ChatMessage, Classification, Outcome, QAItem, Role};

pub use embed::{cosine_similarity, Embedder, EmbeddingVector, MockEmbedder, RemoteEmbedder, TableEmbedder, MOCK_DIM};
pub use refine::{dedup_refine, save_removals, DelusionExample, RefineFailure, Refined, Removal, Trigger};

/// Target text for questions the model should decline.
pub const REFUSAL_TARGET: &str = "I don't know";

// ---------------------------------------------------------------- records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Unmodified question with its gold answer.
    Clean,
    /// Question with a perturbed wrong answer.
    Noisy,
    /// Question the model got wrong, targeted at a refusal.
    Refusal,
    /// Question the model got right, targeted at its gold answer.
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub source_id: String,
    pub question: String,
    pub kind: RecordKind,
    /// Baseline delusion/hallucination label of the source item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Classification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<usize>,
    /// Whether a noisy variant belongs to the shared identical group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identical: Option<bool>,
}

/// One chat-format training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRecord {
    pub messages: Vec<ChatMessage>,
    pub meta: RecordMeta,
}

impl ChatRecord {
    pub fn new(meta: RecordMeta, answer: &str) -> Result<Self> {
        let mut messages = PromptKind::Logits
            .template()
            .render(&PromptVars::question(&meta.question))?;
        messages.push(ChatMessage::assistant(answer));
        Ok(Self { messages, meta })
    }

    pub fn answer(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map_or("", |m| m.content.as_str())
    }
}

pub fn save_chat_records(records: &[ChatRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_chat_records(path: &Path) -> Result<Vec<ChatRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChatRecord = serde_json::from_str(line).map_err(|e| Error::DataLine {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !rec.messages.iter().any(|m| m.role == Role::Assistant) {
            return Err(Error::DataLine {
                path: path.into(),
                line: i + 1,
                message: "record has no assistant message".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------- perturbation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Digit,
    Lower,
    Upper,
}

impl CharClass {
    /// Characters outside the three classes are treated as lowercase text.
    fn of(c: char) -> Self {
        if c.is_ascii_digit() {
            CharClass::Digit
        } else if c.is_ascii_uppercase() {
            CharClass::Upper
        } else {
            CharClass::Lower
        }
    }

    fn alphabet(self) -> &'static [u8] {
        match self {
            CharClass::Digit => b"0123456789",
            CharClass::Lower => b"abcdefghijklmnopqrstuvwxyz",
            CharClass::Upper => b"ABCDEFGHIJKLMNOPQRSTUVWXYZ",
        }
    }

    fn sample(self, rng: &mut impl Rng, not: Option<char>) -> char {
        loop {
            let c = *self.alphabet().choose(rng).unwrap() as char;
            if Some(c) != not {
                return c;
            }
        }
    }
}

/// A single-character edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Insert { pos: usize, ch: char },
    Delete { pos: usize },
    Replace { pos: usize, ch: char },
}

/// Applies `edit` at a char (not byte) position.
pub fn apply_edit(answer: &str, edit: Edit) -> String {
    let mut chars: Vec<char> = answer.chars().collect();
    match edit {
        Edit::Insert { pos, ch } => chars.insert(pos, ch),
        Edit::Delete { pos } => {
            chars.remove(pos);
        }
        Edit::Replace { pos, ch } => chars[pos] = ch,
    }
    chars.into_iter().collect()
}

/// Draws one edit uniformly over the allowed kinds. Deletion is only allowed
/// when more than one character remains.
pub fn draw_edit(answer: &str, rng: &mut impl Rng) -> Edit {
    let chars: Vec<char> = answer.chars().collect();
    let n = chars.len();
    let kinds = if n > 1 { 3 } else { 2 };
    match rng.gen_range(0..kinds) {
        0 => {
            let pos = rng.gen_range(0..=n);
            let class = CharClass::of(chars[rng.gen_range(0..n)]);
            Edit::Insert {
                pos,
                ch: class.sample(rng, None),
            }
        }
        1 => {
            let pos = rng.gen_range(0..n);
            let old = chars[pos];
            Edit::Replace {
                pos,
                ch: CharClass::of(old).sample(rng, Some(old)),
            }
        }
        _ => Edit::Delete {
            pos: rng.gen_range(0..n),
        },
    }
}

/// One random character-level edit; the result always differs from `answer`.
pub fn perturb_answer(answer: &str, rng: &mut impl Rng) -> Result<String> {
    if answer.is_empty() {
        return Err(Error::Contract("cannot perturb an empty answer".into()));
    }
    Ok(apply_edit(answer, draw_edit(answer, rng)))
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// ---------------------------------------------------------------- noise synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub proportion: f64,
    pub level: u8,
    pub variants_per_item: usize,
    pub seed: u64,
    /// Character edits per perturbed answer.
    pub edits: usize,
}

impl NoiseSpec {
    pub fn new(proportion: f64, level: u8, seed: u64) -> Self {
        Self {
            proportion,
            level,
            variants_per_item: 20,
            seed,
            edits: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::Config(format!("noise proportion {} outside [0, 1]", self.proportion)));
        }
        if !(1..=4).contains(&self.level) {
            return Err(Error::Config(format!("noise level {} outside 1..=4", self.level)));
        }
        if self.variants_per_item == 0 {
            return Err(Error::Config("variants_per_item must be positive".into()));
        }
        if self.edits == 0 {
            return Err(Error::Config("edits must be positive".into()));
        }
        Ok(())
    }

    /// Share of variants that carry the same wrong answer.
    pub fn identical_fraction(&self) -> f64 {
        f64::from(self.level) / 4.0
    }

    /// ceil(identical_fraction × variants), computed exactly in quarters.
    pub fn identical_count(&self) -> usize {
        (usize::from(self.level) * self.variants_per_item).div_ceil(4)
    }
}

/// Per-item generator: the run seed mixed with a hash of the item id.
pub fn item_rng(seed: u64, item_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(item_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(bytes))
}

fn perturb_n(answer: &str, edits: usize, rng: &mut impl Rng) -> Result<String> {
    loop {
        let mut out = answer.to_string();
        for _ in 0..edits {
            out = perturb_answer(&out, rng)?;
        }
        if out != answer {
            return Ok(out);
        }
    }
}

/// Wrong answers for one item: the first `identical` share one perturbation,
/// the rest are distinct from it and from each other.
fn noisy_variants(answer: &str, spec: &NoiseSpec, rng: &mut impl Rng) -> Result<Vec<String>> {
    let shared = perturb_n(answer, spec.edits, rng)?;
    let k = spec.identical_count();
    let mut out = vec![shared.clone(); k];
    let mut seen: BTreeSet<String> = BTreeSet::from([shared]);
    let budget = 1000 * spec.variants_per_item;
    let mut tries = 0;
    while out.len() < spec.variants_per_item {
        let v = perturb_n(answer, spec.edits, rng)?;
        if seen.insert(v.clone()) {
            out.push(v);
        }
        tries += 1;
        if tries > budget {
            return Err(Error::Data(format!(
                "answer {answer:?} admits too few distinct perturbations for {} variants",
                spec.variants_per_item
            )));
        }
    }
    Ok(out)
}

/// Turns a `proportion` of items into noisy ones and keeps the rest clean.
pub fn synthesize_noise_set(items: &[QAItem], spec: &NoiseSpec) -> Result<Vec<ChatRecord>> {
    spec.validate()?;
    if (usize::from(spec.level) * spec.variants_per_item) % 4 != 0 {
        log::warn!(
            "level {} over {} variants does not divide evenly; identical group rounded up to {}",
            spec.level,
            spec.variants_per_item,
            spec.identical_count()
        );
    }
    for it in items {
        if it.primary_answer().is_empty() {
            return Err(Error::Data(format!("item {} has an empty answer", it.id)));
        }
    }
    let n_noisy = (spec.proportion * items.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let noisy: BTreeSet<usize> = order[..n_noisy].iter().copied().collect();

    let mut out = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let answer = it.primary_answer();
        if !noisy.contains(&i) {
            out.push(ChatRecord::new(
                RecordMeta {
                    id: it.id.clone(),
                    source_id: it.id.clone(),
                    question: it.question.clone(),
                    kind: RecordKind::Clean,
                    label: None,
                    variant: None,
                    identical: None,
                },
                answer,
            )?);
            continue;
        }
        let mut rng = item_rng(spec.seed, &it.id);
        let k = spec.identical_count();
        for (v, wrong) in noisy_variants(answer, spec, &mut rng)?.into_iter().enumerate() {
            out.push(ChatRecord::new(
                RecordMeta {
                    id: format!("{}#v{}", it.id, v + 1),
                    source_id: it.id.clone(),
                    question: it.question.clone(),
                    kind: RecordKind::Noisy,
                    label: None,
                    variant: Some(v + 1),
                    identical: Some(v < k),
                },
                &wrong,
            )?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- refusal SFT

/// Mixes refusal-targeted incorrect questions with answer-targeted correct ones.
pub fn build_refusal_sft_set(records: &[AuditRecord], refuse_ratio: f64, total: usize, seed: u64) -> Result<Vec<ChatRecord>> {
    if !(refuse_ratio > 0.0 && refuse_ratio < 1.0) {
        return Err(Error::Config(format!("refuse ratio {refuse_ratio} outside (0, 1)")));
    }
    let n_refuse = (refuse_ratio * total as f64).round() as usize;
    let n_answer = total - n_refuse;
    let pool = |o: Outcome| -> Vec<&AuditRecord> { records.iter().filter(|r| r.verdict.outcome == o).collect() };
    let (mut wrong, mut right) = (pool(Outcome::Incorrect), pool(Outcome::Correct));
    if wrong.len() < n_refuse {
        return Err(Error::Data(format!(
            "refusal side short: need {n_refuse} incorrect records, have {}",
            wrong.len()
        )));
    }
    if right.len() < n_answer {
        return Err(Error::Data(format!(
            "answer side short: need {n_answer} correct records, have {}",
            right.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    wrong.shuffle(&mut rng);
    right.shuffle(&mut rng);

    let label = |r: &AuditRecord| match r.verdict.classification {
        c @ (Classification::Delusion | Classification::Hallucination) => Some(c),
        _ => None,
    };
    let meta = |r: &AuditRecord, kind| RecordMeta {
        id: r.item.id.clone(),
        source_id: r.item.id.clone(),
        question: r.item.question.clone(),
        kind,
        label: label(r),
        variant: None,
        identical: None,
    };
    let mut out = Vec::with_capacity(total);
    for r in &wrong[..n_refuse] {
        out.push(ChatRecord::new(meta(r, RecordKind::Refusal), REFUSAL_TARGET)?);
    }
    for r in &right[..n_answer] {
        out.push(ChatRecord::new(meta(r, RecordKind::Answer), r.item.primary_answer())?);
    }
    out.shuffle(&mut rng);
    Ok(out)
}
