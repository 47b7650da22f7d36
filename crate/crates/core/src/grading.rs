//! Answer normalization and Correct / Incorrect / Rejected grading.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Outcome, QAItem};

const DEFAULT_LEXICON: &str = include_str!("../config/refusal_lexicon_v1.txt");

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Unicode punctuation that shows up in model output but is not ASCII.
const EXTRA_PUNCT: &[char] = &[
    '\u{2018}', '\u{2019}', '\u{201c}', '\u{201d}', '\u{2013}', '\u{2014}', '\u{2026}', '\u{00ab}',
    '\u{00bb}', '\u{00bf}', '\u{00a1}', '\u{00b7}',
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub original: String,
    pub canonical: String,
}

impl NormalizedAnswer {
    pub fn tokens(&self) -> Vec<&str> {
        self.canonical.split(' ').filter(|t| !t.is_empty()).collect()
    }
}

/// Lowercase, strip punctuation, drop standalone articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> NormalizedAnswer {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || EXTRA_PUNCT.contains(c)))
        .collect();
    let canonical = no_punct
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ");
    NormalizedAnswer {
        original: text.to_string(),
        canonical,
    }
}

/// True when `needle` occurs as a contiguous run of whole tokens in `hay`.
/// An empty needle never matches.
pub fn contains_tokens(hay: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// How a candidate answer is compared against a reference string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Reference tokens appear contiguously inside the answer.
    #[default]
    Containment,
    /// Canonical forms must be equal.
    Strict,
}

/// Phrases whose presence marks an answer as a refusal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalLexicon {
    phrases: Vec<NormalizedAnswer>,
}

impl Default for RefusalLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON)
    }
}

impl RefusalLexicon {
    /// Parses one phrase per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        let phrases = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(normalize_answer)
            .filter(|p| !p.canonical.is_empty())
            .collect();
        Self { phrases }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lex = Self::parse(&text);
        if lex.phrases.is_empty() {
            return Err(Error::Config(format!(
                "refusal lexicon {} has no phrases",
                path.display()
            )));
        }
        Ok(lex)
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.phrases.iter().map(|p| p.original.as_str())
    }

    pub fn matches(&self, answer: &NormalizedAnswer) -> bool {
        let toks = answer.tokens();
        self.phrases.iter().any(|p| contains_tokens(&toks, &p.tokens()))
    }
}

/// Grading rules: the refusal lexicon plus the alias matching mode.
#[derive(Debug, Clone, Default)]
pub struct Grader {
    pub lexicon: RefusalLexicon,
    pub mode: MatchMode,
}

impl Grader {
    pub fn new(lexicon: RefusalLexicon, mode: MatchMode) -> Self {
        Self { lexicon, mode }
    }

    pub fn is_rejection(&self, text: &str) -> bool {
        self.lexicon.matches(&normalize_answer(text))
    }

    /// Whether `reference` counts as present in `answer` under this grader's mode.
    pub fn reference_matches(&self, answer: &NormalizedAnswer, reference: &NormalizedAnswer) -> bool {
        match self.mode {
            MatchMode::Strict => !reference.canonical.is_empty() && answer.canonical == reference.canonical,
            MatchMode::Containment => contains_tokens(&answer.tokens(), &reference.tokens()),
        }
    }

    /// Rejection is checked first; then any alias match makes the answer Correct.
    pub fn grade(&self, answer_text: &str, item: &QAItem) -> Outcome {
        let answer = normalize_answer(answer_text);
        if self.lexicon.matches(&answer) {
            return Outcome::Rejected;
        }
        let hit = item
            .gold_answers
            .iter()
            .map(|a| normalize_answer(a))
            .any(|alias| self.reference_matches(&answer, &alias));
        if hit {
            Outcome::Correct
        } else {
            Outcome::Incorrect
        }
    }

    /// Symmetric agreement between two model answers (used by verifier voting):
    /// equal canonical forms, or under containment either one inside the other.
    pub fn answers_agree(&self, a: &str, b: &str) -> bool {
        let (a, b) = (normalize_answer(a), normalize_answer(b));
        if a.canonical.is_empty() || b.canonical.is_empty() {
            return false;
        }
        match self.mode {
            MatchMode::Strict => a.canonical == b.canonical,
            MatchMode::Containment => {
                let (ta, tb) = (a.tokens(), b.tokens());
                contains_tokens(&ta, &tb) || contains_tokens(&tb, &ta)
            }
        }
    }
}

pub fn is_rejection(text: &str) -> bool {
    Grader::default().is_rejection(text)
}

pub fn grade(answer_text: &str, item: &QAItem) -> Outcome {
    Grader::default().grade(answer_text, item)
}
