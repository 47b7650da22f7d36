//! Mock fixtures and helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use delusion_core::client::{MockScript, ScriptedCompletion};
use delusion_core::dataset::save_dataset;
use delusion_core::estimators::{answer_request, consistency_request, p_true_request, verb_1s_request, verb_2s_request};
use delusion_core::types::{Outcome, QAItem, TokenLogprob};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BIN: &str = env!("CARGO_BIN_EXE_delusion-audit");

/// Runs the CLI and returns its output, whatever the exit status.
pub fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn delusion-audit")
}

/// Runs the CLI and fails with its stderr unless it exits 0.
pub fn cli_ok(args: &[&str]) -> Result<String, String> {
    let out = cli(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "delusion-audit {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub struct Fixture {
    pub dataset: PathBuf,
    pub script: PathBuf,
}

impl Fixture {
    pub fn base_url(&self) -> String {
        format!("mock:{}", self.script.display())
    }
}

fn item(id: &str, question: &str, gold: &str, source: &str) -> QAItem {
    QAItem {
        id: id.into(),
        question: question.into(),
        gold_answers: vec![gold.into()],
        passages: None,
        source: source.into(),
    }
}

fn save(dir: &Path, name: &str, items: &[QAItem], script: &MockScript) -> Fixture {
    let dataset = dir.join(format!("{name}.jsonl"));
    let script_path = dir.join(format!("{name}.script.json"));
    save_dataset(items, &dataset).unwrap();
    script.save(&script_path).unwrap();
    Fixture {
        dataset,
        script: script_path,
    }
}

/// Ten items for the raw_logits method.
///
/// Six correct, three incorrect, one rejected. Among the nine answered items
/// the correct ones sit at ranks 2,3,4,5,6,8 (threshold 28/54); the incorrect
/// ones at ranks 9 and 7 are delusions and the one at rank 1 a hallucination.
pub struct TenItem {
    pub fixture: Fixture,
    /// (id, outcome, rank among answered items or None when rejected)
    pub plan: Vec<(String, Outcome, Option<u32>)>,
}

pub fn fixture10(dir: &Path) -> TenItem {
    let plan: [(Outcome, Option<u32>); 10] = [
        (Outcome::Correct, Some(2)),
        (Outcome::Incorrect, Some(9)),
        (Outcome::Correct, Some(3)),
        (Outcome::Rejected, None),
        (Outcome::Correct, Some(4)),
        (Outcome::Incorrect, Some(1)),
        (Outcome::Correct, Some(5)),
        (Outcome::Correct, Some(6)),
        (Outcome::Incorrect, Some(7)),
        (Outcome::Correct, Some(8)),
    ];
    let mut items = Vec::new();
    let mut script = MockScript::default();
    let mut out = Vec::new();
    for (i, (outcome, rank)) in plan.iter().enumerate() {
        let id = format!("t{:02}", i + 1);
        let it = item(&id, &format!("What is the code word number {}?", i + 1), &format!("alpha{}", i + 1), "fixture10");
        let text = match outcome {
            Outcome::Correct => format!("alpha{}", i + 1),
            Outcome::Incorrect => format!("omega{}", i + 1),
            Outcome::Rejected => "I don't know.".to_string(),
        };
        // strictly increasing in rank; the rejected answer gets a middling value
        let lp = -f64::from(10 - rank.unwrap_or(5)) / 4.0;
        let msgs = answer_request(&it.id, &it.question).unwrap().messages;
        script.add_greedy(&msgs, ScriptedCompletion::uniform(text, lp));
        out.push((id, *outcome, *rank));
        items.push(it);
    }
    TenItem {
        fixture: save(dir, "fixture10", &items, &script),
        plan: out,
    }
}

/// Planted per-method values of one item in the 50-item fixture. Each value
/// is an integer grid position; the belief scores are increasing in it.
#[derive(Debug, Clone)]
pub struct Planted {
    pub id: String,
    pub outcome: Outcome,
    /// raw_logits: answer logprob is -(8 - level)/8.
    pub logits_level: i64,
    /// p_true: P(True) = j/20.
    pub p_true_j: i64,
    /// agreement: k of 10 samples repeat the answer.
    pub agree_k: i64,
    /// verb_1s / verb_2s confidence percentages.
    pub verb1: i64,
    pub verb2: i64,
}

pub const CONSISTENCY_N: u32 = 10;
pub const SEED: u64 = 0;

pub fn fixture50(dir: &Path, plant_seed: u64) -> (Fixture, Vec<Planted>) {
    let mut rng = ChaCha8Rng::seed_from_u64(plant_seed);
    let mut items = Vec::new();
    let mut plan = Vec::new();
    let mut script = MockScript::default();
    for i in 0..50 {
        let id = format!("m{i:02}");
        let gold = format!("gold{i}");
        let it = item(&id, &format!("Planted question {i}?"), &gold, "fixture50");
        let outcome = match i % 10 {
            0..=5 => Outcome::Correct,
            6..=8 => Outcome::Incorrect,
            _ => Outcome::Rejected,
        };
        let pl = Planted {
            id: id.clone(),
            outcome,
            logits_level: rng.gen_range(0..8),
            p_true_j: rng.gen_range(1..20),
            agree_k: rng.gen_range(2..=10),
            verb1: 10 * rng.gen_range(1..=10),
            verb2: 10 * rng.gen_range(1..=10),
        };
        let answer = match outcome {
            Outcome::Correct => gold.clone(),
            Outcome::Incorrect => format!("wrong{i}"),
            Outcome::Rejected => "I don't know".to_string(),
        };
        let q = it.question.as_str();

        let lp = -((8 - pl.logits_level) as f64) / 8.0;
        script.add_greedy(&answer_request(&id, q).unwrap().messages, ScriptedCompletion::uniform(answer.clone(), lp));

        let pt = pl.p_true_j as f64 / 20.0;
        let (lt, lf) = (pt.ln(), (1.0 - pt).ln());
        let first = TokenLogprob {
            token: "True".into(),
            logprob: lt,
            top_alternatives: vec![("True".into(), lt), ("False".into(), lf)],
        };
        script.add_greedy(
            &p_true_request(&id, q, &answer).unwrap().messages,
            ScriptedCompletion::with_logprobs(vec![first]),
        );

        let samples = (0..CONSISTENCY_N as i64)
            .map(|s| {
                if s < pl.agree_k {
                    ScriptedCompletion::text(answer.clone())
                } else {
                    ScriptedCompletion::text(format!("other{i}x{s}"))
                }
            })
            .collect();
        script.add_sampled(
            &consistency_request(&id, q, CONSISTENCY_N, Some(SEED)).unwrap().messages,
            samples,
        );

        script.add_greedy(
            &verb_1s_request(&id, q).unwrap().messages,
            ScriptedCompletion::text(format!("{answer}. Confidence: {}%", pl.verb1)),
        );
        script.add_greedy(
            &verb_2s_request(&id, q, &answer).unwrap().messages,
            ScriptedCompletion::text(format!("I am {}% confident.", pl.verb2)),
        );
        items.push(it);
        plan.push(pl);
    }
    (save(dir, "fixture50", &items, &script), plan)
}

pub const GOLDEN_Q1: &str = "Which city is home to the Eiffel Tower?";
pub const GOLDEN_Q2: &str = "Who wrote the novel Middlemarch?";

pub fn golden_passages() -> Vec<String> {
    vec![
        "The Eiffel Tower is a wrought-iron lattice tower in Paris.".into(),
        "Paris is the capital of France.".into(),
        "Gustave Eiffel's company built the tower for the 1889 World's Fair.".into(),
    ]
}

/// Two items: g1 answered correctly ("Paris"), g2 wrongly ("Charles Dickens").
pub fn golden_fixture(dir: &Path) -> (Fixture, PathBuf) {
    let g1 = item("g1", GOLDEN_Q1, "Paris", "golden");
    let g2 = item("g2", GOLDEN_Q2, "George Eliot", "golden");
    let mut script = MockScript::default();
    script.add_greedy(
        &answer_request("g1", GOLDEN_Q1).unwrap().messages,
        ScriptedCompletion::uniform("Paris", -0.1),
    );
    script.add_greedy(
        &answer_request("g2", GOLDEN_Q2).unwrap().messages,
        ScriptedCompletion::uniform("Charles Dickens", -0.2),
    );
    let fx = save(dir, "golden", &[g1.clone(), g2], &script);

    let mut rag = g1;
    rag.passages = Some(golden_passages());
    let rag_path = dir.join("golden_rag.jsonl");
    save_dataset(&[rag], &rag_path).unwrap();
    (fx, rag_path)
}

pub fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
