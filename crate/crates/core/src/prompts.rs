//! Prompt templates for the belief estimators and behavioral protocols.
//!
//! Texts live in `prompts/v1/*.txt` and are compiled in. Placeholders are
//! `{question}`, `{answer}`, `{previous_answer}` and `{passages}`;
//! substitution is single-pass, so placeholder-like text inside a question is
//! left alone.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ChatMessage, Method};

pub const PROMPT_VERSION: u32 = 1;

macro_rules! prompt {
    ($name:literal) => {
        (
            include_str!(concat!("../prompts/v1/", $name, ".system.txt")),
            include_str!(concat!("../prompts/v1/", $name, ".user.txt")),
        )
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HonestyLevel {
    CanRefuse,
    LessRefuse,
    MoreRefuse,
    MediumRefuse,
    HighRefuse,
    MostRefuse,
}

impl HonestyLevel {
    pub const ALL: [HonestyLevel; 6] = [
        HonestyLevel::CanRefuse,
        HonestyLevel::LessRefuse,
        HonestyLevel::MoreRefuse,
        HonestyLevel::MediumRefuse,
        HonestyLevel::HighRefuse,
        HonestyLevel::MostRefuse,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            HonestyLevel::CanRefuse => "helpful_can_refuse",
            HonestyLevel::LessRefuse => "helpful_less_refuse",
            HonestyLevel::MoreRefuse => "helpful_more_refuse",
            HonestyLevel::MediumRefuse => "helpful_medium_refuse",
            HonestyLevel::HighRefuse => "helpful_high_refuse",
            HonestyLevel::MostRefuse => "helpful_most_refuse",
        }
    }
}

impl fmt::Display for HonestyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for HonestyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.strip_prefix("helpful_").unwrap_or(s);
        HonestyLevel::ALL
            .into_iter()
            .find(|l| l.tag().strip_prefix("helpful_") == Some(s))
            .ok_or_else(|| Error::Config(format!("unknown honesty level {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKind {
    /// Greedy answer whose token logprobs feed the raw-logits belief.
    Logits,
    PTrue,
    Consistency,
    Verb1s,
    Verb2s,
    Honesty(HonestyLevel),
    Reflection,
    Rag,
}

impl PromptKind {
    pub fn all() -> Vec<PromptKind> {
        let mut v = vec![
            PromptKind::Logits,
            PromptKind::PTrue,
            PromptKind::Consistency,
            PromptKind::Verb1s,
            PromptKind::Verb2s,
        ];
        v.extend(HonestyLevel::ALL.map(PromptKind::Honesty));
        v.push(PromptKind::Reflection);
        v.push(PromptKind::Rag);
        v
    }

    /// The prompt an estimator issues.
    pub fn for_method(method: Method) -> PromptKind {
        match method {
            Method::RawLogits => PromptKind::Logits,
            Method::Agreement => PromptKind::Consistency,
            Method::PTrue => PromptKind::PTrue,
            Method::Verb1s => PromptKind::Verb1s,
            Method::Verb2s => PromptKind::Verb2s,
        }
    }

    pub fn name(self) -> String {
        match self {
            PromptKind::Logits => "logits".into(),
            PromptKind::PTrue => "p_true".into(),
            PromptKind::Consistency => "consistency".into(),
            PromptKind::Verb1s => "verb_1s".into(),
            PromptKind::Verb2s => "verb_2s".into(),
            PromptKind::Honesty(l) => l.tag().into(),
            PromptKind::Reflection => "reflection".into(),
            PromptKind::Rag => "rag".into(),
        }
    }

    fn texts(self) -> (&'static str, &'static str) {
        match self {
            PromptKind::Logits => prompt!("logits"),
            PromptKind::PTrue => prompt!("p_true"),
            PromptKind::Consistency => prompt!("consistency"),
            PromptKind::Verb1s => prompt!("verb_1s"),
            PromptKind::Verb2s => prompt!("verb_2s"),
            PromptKind::Honesty(HonestyLevel::CanRefuse) => prompt!("honesty_can_refuse"),
            PromptKind::Honesty(HonestyLevel::LessRefuse) => prompt!("honesty_less_refuse"),
            PromptKind::Honesty(HonestyLevel::MoreRefuse) => prompt!("honesty_more_refuse"),
            PromptKind::Honesty(HonestyLevel::MediumRefuse) => prompt!("honesty_medium_refuse"),
            PromptKind::Honesty(HonestyLevel::HighRefuse) => prompt!("honesty_high_refuse"),
            PromptKind::Honesty(HonestyLevel::MostRefuse) => prompt!("honesty_most_refuse"),
            PromptKind::Reflection => prompt!("reflection"),
            PromptKind::Rag => prompt!("rag"),
        }
    }

    pub fn template(self) -> PromptTemplate {
        let (system_text, user_template) = self.texts();
        PromptTemplate {
            kind: self,
            system_text,
            user_template,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub system_text: &'static str,
    pub user_template: &'static str,
}

/// Values substituted into a template.
#[derive(Debug, Clone, Default)]
pub struct PromptVars<'a> {
    pub question: &'a str,
    pub answer: Option<&'a str>,
    pub previous_answer: Option<&'a str>,
    pub passages: Option<&'a str>,
}

impl<'a> PromptVars<'a> {
    pub fn question(question: &'a str) -> Self {
        Self {
            question,
            ..Self::default()
        }
    }
}

const PLACEHOLDERS: [&str; 4] = ["question", "answer", "previous_answer", "passages"];

impl PromptTemplate {
    /// Placeholder names used by the user template.
    pub fn placeholders(&self) -> BTreeSet<&'static str> {
        PLACEHOLDERS
            .into_iter()
            .filter(|p| self.user_template.contains(&format!("{{{p}}}")))
            .collect()
    }

    pub fn render(&self, vars: &PromptVars<'_>) -> Result<Vec<ChatMessage>> {
        let user = substitute(self.user_template, |name| match name {
            "question" => Some(vars.question),
            "answer" => vars.answer,
            "previous_answer" => vars.previous_answer,
            "passages" => vars.passages,
            _ => None,
        })
        .map_err(|p| Error::Contract(format!("prompt {} needs a value for {{{p}}}", self.kind.name())))?;
        Ok(vec![
            ChatMessage::system(self.system_text),
            ChatMessage::user(user),
        ])
    }

    /// Renders leaving unknown placeholders literally in place (for dry runs).
    pub fn render_partial(&self, vars: &PromptVars<'_>) -> Vec<ChatMessage> {
        let user = substitute_lenient(self.user_template, |name| match name {
            "question" => Some(vars.question),
            "answer" => vars.answer,
            "previous_answer" => vars.previous_answer,
            "passages" => vars.passages,
            _ => None,
        });
        vec![ChatMessage::system(self.system_text), ChatMessage::user(user)]
    }
}

fn substitute<'v>(
    template: &str,
    lookup: impl Fn(&str) -> Option<&'v str>,
) -> std::result::Result<String, String> {
    let mut missing = None;
    let out = substitute_with(template, |name| {
        let v = lookup(name);
        if v.is_none() && missing.is_none() {
            missing = Some(name.to_string());
        }
        v
    });
    match missing {
        Some(m) => Err(m),
        None => Ok(out),
    }
}

fn substitute_lenient<'v>(template: &str, lookup: impl Fn(&str) -> Option<&'v str>) -> String {
    substitute_with(template, lookup)
}

fn substitute_with<'v>(template: &str, mut lookup: impl FnMut(&str) -> Option<&'v str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if PLACEHOLDERS.contains(&&after[..close]) => {
                let name = &after[..close];
                match lookup(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Formats retrieval passages as `Document i:` blocks separated by blank lines.
pub fn join_passages(passages: &[String]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("Document {}:\n{}", i + 1, p))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// One of the six refusal-encouraging system prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HonestyPrompt {
    pub level: HonestyLevel,
    pub system_text: &'static str,
}

impl HonestyPrompt {
    pub fn all() -> [HonestyPrompt; 6] {
        HonestyLevel::ALL.map(|level| HonestyPrompt {
            level,
            system_text: PromptKind::Honesty(level).template().system_text,
        })
    }

    /// Pairs of levels whose texts are byte-identical.
    pub fn duplicates() -> Vec<(HonestyLevel, HonestyLevel)> {
        let all = Self::all();
        let mut out = Vec::new();
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if a.system_text == b.system_text {
                    out.push((a.level, b.level));
                }
            }
        }
        out
    }
}
