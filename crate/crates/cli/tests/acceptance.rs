//! Acceptance suite: one pass/fail line per criterion, with timing.
//!
//! Runs without the libtest harness so the summary lines always print.
//! Criterion 9 needs a live endpoint and only runs when
//! `DELUSION_LIVE_BASE_URL` and `DELUSION_LIVE_DATASET` are set
//! (`DELUSION_LIVE_API_KEY_ENV` optionally names the key variable).

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use common::*;
use delusion_core::calibrate::{belief_threshold, classify, rank_normalize, ScoredItem};
use delusion_core::client::{Client, EndpointConfig, MockBackend, MockScript, ScriptedCompletion};
use delusion_core::estimators::{agreement_belief, p_true_from_trace, raw_logits_belief};
use delusion_core::grading::Grader;
use delusion_core::noise::{
    dedup_refine, synthesize_noise_set, ChatRecord, DelusionExample, Embedder, MockEmbedder, NoiseSpec, RecordKind,
    RecordMeta, TableEmbedder,
};
use delusion_core::protocols::{keep_answer, verifier_request, vote_verify};
use delusion_core::records::load_records;
use delusion_core::report::load_report;
use delusion_core::types::{
    Classification, GenerationTrace, Method, Outcome, QAItem, RoleTag, SamplingParams, ScoreKey, TokenLogprob,
};
use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{Float, One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn trace(lps: Vec<TokenLogprob>) -> GenerationTrace {
    GenerationTrace {
        item_id: "x".into(),
        role_tag: RoleTag::Answer,
        prompt_messages: vec![],
        output_text: lps.iter().map(|t| t.token.as_str()).collect(),
        token_logprobs: lps,
        sampling: SamplingParams::greedy(),
        created_at: Utc::now(),
        retries: 0,
        omitted_params: vec![],
    }
}

// ---------------------------------------------------------------- 1

const FRAC: u64 = 256;
const F64_SHIFT: i64 = 1100;

/// Exact value of `x` times 2^F64_SHIFT.
fn f64_scaled(x: f64) -> BigInt {
    let (mant, exp, sign) = x.integer_decode();
    let v = BigInt::from(mant) << ((i64::from(exp) + F64_SHIFT) as u64);
    if sign < 0 {
        -v
    } else {
        v
    }
}

/// exp(x) for a fixed-point x (scaled by 2^FRAC, x <= 0): Taylor series after
/// halving six times, then six squarings.
fn exp_fixed(x: &BigInt) -> BigInt {
    let one = BigInt::one() << FRAC;
    let y = x >> 6u32;
    let mut term = one.clone();
    let mut sum = one;
    for i in 1u32..200 {
        term = (&term * &y >> FRAC) / BigInt::from(i);
        if term.is_zero() {
            break;
        }
        sum += &term;
    }
    for _ in 0..6 {
        sum = &sum * &sum >> FRAC;
    }
    sum
}

/// exp(mean(lps)) from exact rational arithmetic on the f64 inputs.
fn exp_mean_oracle(lps: &[f64]) -> f64 {
    let total: BigInt = lps.iter().map(|&l| f64_scaled(l)).sum();
    let n = BigInt::from(lps.len());
    let mean_fixed = (total << FRAC) / (n << (F64_SHIFT as u64));
    let e = exp_fixed(&mean_fixed);
    e.to_f64().unwrap() / 2f64.powi(FRAC as i32)
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let len = rng.gen_range(1..=64);
        let lps: Vec<f64> = (0..len)
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => -rng.gen_range(0.0..1e-3),
                _ => -rng.gen_range(0.0..20.0),
            })
            .collect();
        let toks = lps.iter().map(|&l| TokenLogprob::new("w", l)).collect();
        let got = raw_logits_belief(&trace(toks)).map_err(|e| e.to_string())?;
        let want = exp_mean_oracle(&lps);
        ensure((got - want).abs() <= 1e-12, || format!("raw_logits case {case}: {got} vs oracle {want}"))?;

        let n = rng.gen_range(1..=20);
        let pool = ["paris", "lyon", "nice", "metz"];
        let answers: Vec<&str> = (0..n).map(|_| *pool[..rng.gen_range(1..=4)].choose(&mut rng).unwrap()).collect();
        let (score, modal) = agreement_belief(&answers).map_err(|e| e.to_string())?;
        let mut best: Option<(&str, usize)> = None;
        for &a in &answers {
            let c = answers.iter().filter(|&&b| b == a).count();
            best = match best {
                Some((ba, bc)) if bc > c || (bc == c && ba <= a) => Some((ba, bc)),
                _ => Some((a, c)),
            };
        }
        let (want_modal, want_count) = best.unwrap();
        ensure(modal == want_modal && score == want_count as f64 / n as f64, || {
            format!("agreement case {case}: ({score}, {modal}) vs ({want_count}/{n}, {want_modal})")
        })?;

        let (t, f) = (-rng.gen_range(0.0..30.0), -rng.gen_range(0.0..30.0));
        let judge = |a: f64, b: f64| {
            let tok = TokenLogprob {
                token: "True".into(),
                logprob: a,
                top_alternatives: vec![("True".into(), a), (" false".into(), b)],
            };
            p_true_from_trace(&trace(vec![tok])).map(|s| s.score)
        };
        let (pt, pf) = (judge(t, f).ok_or("no p_true")?, judge(f, t).ok_or("no p_true")?);
        ensure((pt + pf - 1.0).abs() <= 1e-12, || format!("p_true case {case}: {pt} + {pf} != 1"))?;
        let want = t.exp() / (t.exp() + f.exp());
        ensure(want.is_nan() || (pt - want).abs() <= 1e-12, || format!("p_true case {case}: {pt} vs {want}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 2

/// Delusion and hallucination ids after normalizing, thresholding and classifying.
fn partition(scores: &BTreeMap<usize, f64>, outcomes: &[Outcome]) -> Result<(BTreeSet<usize>, BTreeSet<usize>), String> {
    let ranked = rank_normalize(scores).map_err(|e| e.to_string())?;
    let ids: Vec<String> = (0..outcomes.len()).map(|i| i.to_string()).collect();
    let items: Vec<ScoredItem<'_>> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| ScoredItem {
            item_id: &ids[i],
            outcome: *o,
            score: ranked.get(&i).copied(),
        })
        .collect();
    let spec = belief_threshold(&items, ScoreKey::Method(Method::RawLogits), true).map_err(|e| e.to_string())?;
    let mut del = BTreeSet::new();
    let mut hal = BTreeSet::new();
    for (i, v) in classify(&items, &spec).into_iter().enumerate() {
        match v.classification {
            Classification::Delusion => del.insert(i),
            Classification::Hallucination => hal.insert(i),
            _ => false,
        };
    }
    Ok((del, hal))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..500 {
        let n = rng.gen_range(2..=40);
        let levels = rng.gen_range(1..=n.min(8));
        let scores: BTreeMap<usize, f64> = (0..n).map(|i| (i, f64::from(rng.gen_range(-5..levels as i32)) / 7.0)).collect();
        let ranked = rank_normalize(&scores).map_err(|e| e.to_string())?;
        for (&i, &si) in &scores {
            let ri = ranked[&i];
            ensure(ri > 0.0 && ri <= 1.0, || format!("case {case}: rank {ri} outside (0,1]"))?;
            let less = scores.values().filter(|&&s| s < si).count();
            let eq = scores.values().filter(|&&s| s == si).count();
            let naive = (2 * less + eq + 1) as f64 / (2 * n) as f64;
            ensure((ri - naive).abs() <= 1e-12, || format!("case {case}: rank {ri} vs average rank {naive}"))?;
            for (&j, &sj) in &scores {
                let rj = ranked[&j];
                ensure(!(si < sj) || ri < rj, || format!("case {case}: order broken"))?;
                ensure(si != sj || ri == rj, || format!("case {case}: tie broken"))?;
            }
        }

        let mut outcomes: Vec<Outcome> = (0..n)
            .map(|_| if rng.gen_bool(0.6) { Outcome::Correct } else { Outcome::Incorrect })
            .collect();
        outcomes[rng.gen_range(0..n)] = Outcome::Correct;
        let base = partition(&scores, &outcomes)?;
        for (name, f) in [("x^3", (|x: f64| x * x * x) as fn(f64) -> f64), ("2x+1", |x: f64| 2.0 * x + 1.0)] {
            let moved: BTreeMap<usize, f64> = scores.iter().map(|(k, v)| (*k, f(*v))).collect();
            ensure(partition(&moved, &outcomes)? == base, || format!("case {case}: partition changed under {name}"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- 3

type Q = Ratio<i64>;

/// Average rank / N over the planted grid values of answered items.
fn naive_ranks(vals: &[(usize, i64)]) -> BTreeMap<usize, Q> {
    let n = vals.len() as i64;
    vals.iter()
        .map(|&(i, v)| {
            let less = vals.iter().filter(|&&(_, w)| w < v).count() as i64;
            let eq = vals.iter().filter(|&&(_, w)| w == v).count() as i64;
            (i, Q::new(2 * less + eq + 1, 2 * n))
        })
        .collect()
}

/// Delusion count for one score column; errors if an incorrect score ties the threshold.
fn naive_delusions(scores: &BTreeMap<usize, Q>, outcomes: &[Outcome]) -> Result<usize, String> {
    let correct: Vec<Q> = scores.iter().filter(|(i, _)| outcomes[**i] == Outcome::Correct).map(|(_, s)| *s).collect();
    let threshold = correct.iter().fold(Q::zero(), |a, b| a + b) / Q::from_integer(correct.len() as i64);
    let mut n = 0;
    for (i, s) in scores {
        if outcomes[*i] != Outcome::Incorrect {
            continue;
        }
        let gap = (*s - threshold).to_f64().unwrap().abs();
        if gap < 1e-9 {
            return Err(format!("fixture item {i} sits on the threshold"));
        }
        if *s > threshold {
            n += 1;
        }
    }
    Ok(n)
}

fn criterion_3(dir: &Path) -> Check {
    let (fx, plan) = fixture50(dir, 3);
    let out = dir.join("runs50");
    let run = cli_ok(&[
        "audit",
        "--dataset",
        p(&fx.dataset),
        "--base-url",
        &fx.base_url(),
        "--model",
        "mock-7b",
        "--methods",
        "raw_logits,agreement,p_true,verb_1s,verb_2s",
        "--ensemble",
        "--consistency-n",
        &CONSISTENCY_N.to_string(),
        "--seed",
        &SEED.to_string(),
        "--output",
        p(&out),
    ])?;
    let records = load_records(&Path::new(run.trim()).join("records.jsonl")).map_err(|e| e.to_string())?;

    let outcomes: Vec<Outcome> = plan.iter().map(|pl| pl.outcome).collect();
    let answered: Vec<usize> = (0..plan.len()).filter(|&i| outcomes[i] != Outcome::Rejected).collect();
    let column = |f: fn(&Planted) -> i64| -> BTreeMap<usize, Q> {
        naive_ranks(&answered.iter().map(|&i| (i, f(&plan[i]))).collect::<Vec<_>>())
    };
    let cols: Vec<(ScoreKey, BTreeMap<usize, Q>)> = vec![
        (Method::RawLogits.into(), column(|p| p.logits_level)),
        (Method::Agreement.into(), column(|p| p.agree_k)),
        (Method::PTrue.into(), column(|p| p.p_true_j)),
        (Method::Verb1s.into(), column(|p| p.verb1)),
        (Method::Verb2s.into(), column(|p| p.verb2)),
    ];
    let get = |k: Method| &cols.iter().find(|(key, _)| *key == ScoreKey::Method(k)).unwrap().1;
    let ens: BTreeMap<usize, Q> = answered
        .iter()
        .map(|&i| (i, (get(Method::PTrue)[&i] + get(Method::Agreement)[&i] + get(Method::RawLogits)[&i]) / Q::from_integer(3)))
        .collect();

    let mut summary = Vec::new();
    for (key, scores) in cols.iter().chain(std::iter::once(&(ScoreKey::Ensemble, ens))) {
        let want = naive_delusions(scores, &outcomes)?;
        let got = records
            .iter()
            .filter(|r| r.verdict_for(*key).is_some_and(|v| v.classification == Classification::Delusion))
            .count();
        ensure(got == want, || format!("{key}: {got} delusions, recount says {want}"))?;
        ensure(want > 0 && want < 15, || format!("{key}: degenerate fixture ({want} delusions)"))?;
        summary.push(format!("{key}={want}"));
    }
    eprintln!("    delusions per method: {}", summary.join(" "));
    Ok(())
}

// ---------------------------------------------------------------- 4

fn run_audit10(fx: &Fixture, out: &Path) -> Result<std::path::PathBuf, String> {
    let stdout = cli_ok(&[
        "audit",
        "--dataset",
        p(&fx.dataset),
        "--base-url",
        &fx.base_url(),
        "--model",
        "mock-7b",
        "--seed",
        "7",
        "--output",
        p(out),
    ])?;
    Ok(stdout.trim().into())
}

fn criterion_4(dir: &Path) -> Check {
    let ten = fixture10(dir);
    let a = run_audit10(&ten.fixture, &dir.join("runA"))?;
    let b = run_audit10(&ten.fixture, &dir.join("runB"))?;
    ensure(a.file_name() == b.file_name(), || format!("run ids differ: {a:?} vs {b:?}"))?;
    let mut names: Vec<String> = fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    ensure(
        names == ["config.json", "records.jsonl", "report.csv", "report.json", "report.md"],
        || format!("unexpected run files {names:?}"),
    )?;
    for name in &names {
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        ensure(x == y, || format!("{name} differs between identical runs"))?;
    }

    // brute-force recount from the fixture plan
    let n = ten.plan.len() as f64;
    let count = |o: Outcome| ten.plan.iter().filter(|(_, x, _)| *x == o).count();
    let ranks: Vec<u32> = ten.plan.iter().filter(|(_, o, _)| *o == Outcome::Correct).map(|(_, _, r)| r.unwrap()).collect();
    let answered = ten.plan.iter().filter(|(_, _, r)| r.is_some()).count() as f64;
    let threshold = ranks.iter().map(|&r| f64::from(r) / answered).sum::<f64>() / ranks.len() as f64;
    let delusions = ten
        .plan
        .iter()
        .filter(|(_, o, r)| *o == Outcome::Incorrect && f64::from(r.unwrap()) / answered > threshold)
        .count();
    let brute = [
        count(Outcome::Correct) as f64 / n,
        count(Outcome::Incorrect) as f64 / n,
        count(Outcome::Rejected) as f64 / n,
        delusions as f64 / n,
        delusions as f64 / count(Outcome::Incorrect) as f64,
    ];
    let designed = [0.6, 0.3, 0.1, 0.2, 2.0 / 3.0];
    ensure(brute == designed, || format!("fixture recount {brute:?} != designed {designed:?}"))?;

    let report = load_report(&a.join("report.json")).map_err(|e| e.to_string())?;
    let m = &report.per_method[&ScoreKey::Method(Method::RawLogits)];
    let got = [
        m.accuracy,
        m.error_rate,
        m.reject_rate,
        m.delusion_rate_overall,
        m.delusion_share_of_errors,
    ];
    for ((g, w), name) in got.iter().zip(designed).zip(["accuracy", "error rate", "reject rate", "delusion rate", "delusion share"]) {
        ensure(g.is_some_and(|g| (g - w).abs() < 1e-12), || format!("{name}: report {g:?}, expected {w}"))?;
    }
    let records = load_records(&a.join("records.jsonl")).map_err(|e| e.to_string())?;
    for ((id, o, r), rec) in ten.plan.iter().zip(&records) {
        let want = match (o, r) {
            (Outcome::Incorrect, Some(r)) if f64::from(*r) / answered > threshold => Classification::Delusion,
            (Outcome::Incorrect, _) => Classification::Hallucination,
            _ => Classification::None,
        };
        ensure(rec.item.id == *id && rec.verdict.outcome == *o && rec.verdict.classification == want, || {
            format!("{id}: got {:?}/{:?}", rec.verdict.outcome, rec.verdict.classification)
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grader = Grader::default();
    for case in 0..200 {
        let n_items = rng.gen_range(1..=6);
        let items: Vec<QAItem> = (0..n_items)
            .map(|i| QAItem {
                id: format!("v{i}"),
                question: format!("Vote question {i}?"),
                gold_answers: vec!["x".into()],
                passages: None,
                source: "vote".into(),
            })
            .collect();
        let pattern: Vec<[bool; 3]> = (0..n_items).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let verifiers: Vec<Client> = (0..3)
            .map(|j| {
                let mut script = MockScript::default();
                for (it, pat) in items.iter().zip(&pattern) {
                    let text = if pat[j] { "Target answer".to_string() } else { format!("Other answer {j}") };
                    let msgs = verifier_request(it).unwrap().messages;
                    script.add_greedy(&msgs, ScriptedCompletion::text(text));
                }
                Client::with_backend(EndpointConfig::new("mock:inline", format!("verifier{j}")), Arc::new(MockBackend::new(script)))
            })
            .collect();

        let mut discards: Vec<BTreeSet<String>> = Vec::new();
        for threshold in 1..=3 {
            let mut d = BTreeSet::new();
            for (it, pat) in items.iter().zip(&pattern) {
                let v = vote_verify("target answer", it, &verifiers, threshold, &grader).map_err(|e| e.to_string())?;
                ensure(v.matches == pat.to_vec(), || format!("case {case}: matches {:?} vs planted {pat:?}", v.matches))?;
                let brute = pat.iter().filter(|m| **m).count() >= threshold;
                ensure(v.kept == brute && keep_answer(&v.matches, threshold) == brute, || {
                    format!("case {case}: keep decision wrong at threshold {threshold}")
                })?;
                if !v.kept {
                    d.insert(it.id.clone());
                }
            }
            discards.push(d);
        }
        for w in discards.windows(2) {
            ensure(w[0].is_subset(&w[1]), || format!("case {case}: discard sets not monotone: {discards:?}"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- 6

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn criterion_6() -> Check {
    let answers = ["Paris", "George Eliot", "1889", "Mount Kilimanjaro", "H2O", "Ulysses S. Grant"];
    let items: Vec<QAItem> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| QAItem {
            id: format!("n{i}"),
            question: format!("Noise question {i}?"),
            gold_answers: vec![a.to_string()],
            passages: None,
            source: "noise".into(),
        })
        .collect();
    for (level, expect) in [(1u8, 5usize), (2, 10), (3, 15), (4, 20)] {
        let spec = NoiseSpec::new(1.0, level, 42);
        let set = synthesize_noise_set(&items, &spec).map_err(|e| e.to_string())?;
        let again = synthesize_noise_set(&items, &spec).map_err(|e| e.to_string())?;
        ensure(
            serde_json::to_string(&set).unwrap() == serde_json::to_string(&again).unwrap(),
            || format!("level {level}: output not seed-stable"),
        )?;
        for it in &items {
            let variants: Vec<&ChatRecord> = set.iter().filter(|r| r.meta.source_id == it.id).collect();
            ensure(variants.len() == 20, || format!("level {level}: {} has {} variants", it.id, variants.len()))?;
            let flagged = variants.iter().filter(|r| r.meta.identical == Some(true)).count();
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &variants {
                *counts.entry(r.answer()).or_default() += 1;
                ensure(r.meta.kind == RecordKind::Noisy, || format!("{} is not noisy", r.meta.id))?;
                let d = levenshtein(r.answer(), it.primary_answer());
                ensure(d == 1, || format!("{}: {:?} is {d} edits from {:?}", r.meta.id, r.answer(), it.primary_answer()))?;
            }
            let largest = *counts.values().max().unwrap();
            let singles = counts.values().filter(|&&c| c == 1).count();
            ensure(flagged == expect && largest == expect, || {
                format!("level {level} {}: identical group {largest} (flagged {flagged}), expected {expect}", it.id)
            })?;
            ensure(singles == 20 - expect, || format!("level {level} {}: non-identical variants repeat", it.id))?;
        }
    }
    let other = synthesize_noise_set(&items, &NoiseSpec::new(1.0, 2, 43)).map_err(|e| e.to_string())?;
    let base = synthesize_noise_set(&items, &NoiseSpec::new(1.0, 2, 42)).map_err(|e| e.to_string())?;
    ensure(other != base, || "different seeds gave identical noise".into())
}

// ---------------------------------------------------------------- 7

fn chat(id: &str, question: &str, answer: &str) -> ChatRecord {
    ChatRecord::new(
        RecordMeta {
            id: id.into(),
            source_id: id.into(),
            question: question.into(),
            kind: RecordKind::Clean,
            label: None,
            variant: None,
            identical: None,
        },
        answer,
    )
    .unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn normalize(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .filter(|w| !["a", "an", "the"].contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_7() -> Check {
    let delusions = vec![
        DelusionExample {
            id: "d1".into(),
            question: "Which river flows through the city of Cairo?".into(),
            answer: "The Nile".into(),
        },
        DelusionExample {
            id: "d2".into(),
            question: "Who painted the ceiling of the Sistine Chapel?".into(),
            answer: "Michelangelo".into(),
        },
    ];
    let train = vec![
        chat("r1", "Which river flows through the city of Cairo?", "Nile"),
        chat("r2", "Which river flows through the city of Cairo today?", "Nile River"),
        chat("r3", "What is the boiling point of water at sea level?", "100 degrees"),
        chat("r4", "Name the largest moon of Saturn.", "michelangelo!"),
        chat("r5", "Who painted the ceiling of the Sistine Chapel in Rome?", "Raphael"),
        chat("r6", "How many legs does a spider have?", "Eight"),
        chat("r7", "Which element has the chemical symbol Fe?", "Iron"),
    ];

    // brute-force scan with an independent cosine over the mock vectors
    let vec_of = |t: &str| MockEmbedder::embed_one(t).values;
    let mut want: BTreeSet<String> = BTreeSet::new();
    let mut sims = Vec::new();
    for r in &train {
        let by_answer = delusions.iter().any(|d| normalize(&d.answer) == normalize(r.answer()));
        let best = delusions
            .iter()
            .map(|d| cosine(&vec_of(&r.meta.question), &vec_of(&d.question)))
            .fold(f64::MIN, f64::max);
        sims.push(format!("{}={best:.3}", r.meta.id));
        if by_answer || best > 0.9 {
            want.insert(r.meta.id.clone());
        }
    }
    let refined = dedup_refine(&train, &delusions, &MockEmbedder, 0.9, false).map_err(|e| e.to_string())?;
    let got: BTreeSet<String> = refined.removals.iter().map(|r| r.record_id.clone()).collect();
    ensure(got == want, || format!("removals {got:?}, brute force {want:?} ({})", sims.join(" ")))?;
    ensure(got.contains("r1") && got.contains("r4") && !got.contains("r6"), || format!("fixture expectations broken: {got:?}"))?;
    let again = dedup_refine(&refined.kept, &delusions, &MockEmbedder, 0.9, false).map_err(|e| e.to_string())?;
    ensure(again.removals.is_empty() && again.kept == refined.kept, || "refinement is not idempotent".into())?;

    // exact-boundary table: cos((1,0,0,0), (9,3,3,1)) = 9/10
    let table = TableEmbedder {
        table: BTreeMap::from([
            ("delusion question".to_string(), vec![1.0, 0.0, 0.0, 0.0]),
            ("boundary question".to_string(), vec![9.0, 3.0, 3.0, 1.0]),
            ("above question".to_string(), vec![9.0, 3.0, 3.0, 0.0]),
        ]),
    };
    let probe = table.embed(&["delusion question".into(), "boundary question".into()]).map_err(|e| e.to_string())?;
    ensure(cosine(&probe[0].values, &probe[1].values) == 0.9, || "table boundary is not exactly 0.9".into())?;
    let d = [DelusionExample {
        id: "d".into(),
        question: "delusion question".into(),
        answer: "zzz".into(),
    }];
    let recs = [chat("at", "boundary question", "a"), chat("above", "above question", "b")];
    let r = dedup_refine(&recs, &d, &table, 0.9, false).map_err(|e| e.to_string())?;
    let removed: Vec<&str> = r.removals.iter().map(|x| x.record_id.as_str()).collect();
    ensure(removed == ["above"], || format!("boundary: removed {removed:?}, expected only \"above\""))
}

// ---------------------------------------------------------------- 8

fn criterion_8(dir: &Path) -> Check {
    let (fx, rag) = golden_fixture(dir);
    let dump = cli_ok(&[
        "audit",
        "--dataset",
        p(&fx.dataset),
        "--methods",
        "raw_logits,agreement,p_true,verb_1s,verb_2s",
        "--dry-run",
    ])?;
    // the dry run covers both items; the golden file holds g1
    let g1: String = dump.split_inclusive('\n').take_while(|l| !l.starts_with("=== g2")).collect();
    ensure(g1 == golden("audit_dry_run.txt"), || format!("audit dry run differs:\n{g1}"))?;

    let dump = cli_ok(&["rag", "--dataset", p(&rag), "--dry-run"])?;
    ensure(dump == golden("rag_dry_run.txt"), || format!("rag dry run differs:\n{dump}"))?;

    let out = dir.join("golden_runs");
    let run = cli_ok(&[
        "audit",
        "--dataset",
        p(&fx.dataset),
        "--base-url",
        &fx.base_url(),
        "--model",
        "mock-7b",
        "--output",
        p(&out),
    ])?;
    let run = run.trim();
    let dump = cli_ok(&["honesty", "--baseline", run, "--dry-run"])?;
    ensure(dump == golden("honesty_dry_run.txt"), || format!("honesty dry run differs:\n{dump}"))?;
    let dump = cli_ok(&["reflect", "--baseline", run, "--dry-run"])?;
    ensure(dump == golden("reflect_dry_run.txt"), || format!("reflect dry run differs:\n{dump}"))
}

// ---------------------------------------------------------------- 9

fn criterion_9(dir: &Path, base_url: &str, dataset: &str) -> Check {
    let model = std::env::var("DELUSION_LIVE_MODEL").map_err(|_| "set DELUSION_LIVE_MODEL".to_string())?;
    let key_env = std::env::var("DELUSION_LIVE_API_KEY_ENV").ok();
    let mut audit = vec!["audit", "--dataset", dataset, "--base-url", base_url, "--model", &model, "--output", p(dir)];
    if let Some(k) = &key_env {
        audit.extend(["--api-key-env", k.as_str()]);
    }
    let run = cli_ok(&audit)?;
    let run = run.trim();
    let report = load_report(&Path::new(run).join("report.json")).map_err(|e| e.to_string())?;
    let m = &report.per_method[&ScoreKey::Method(Method::RawLogits)];
    ensure(m.n_delusion > 0 && m.n_hallucination > 0, || {
        format!("logits: {} delusions, {} hallucinations", m.n_delusion, m.n_hallucination)
    })?;
    let mut honesty = vec!["honesty", "--baseline", run, "--output", p(dir)];
    if let Some(k) = &key_env {
        honesty.extend(["--api-key-env", k.as_str()]);
    }
    let hon = cli_ok(&honesty)?;
    let report = load_report(&Path::new(hon.trim()).join("report.json")).map_err(|e| e.to_string())?;
    let levels = report.protocol_sections.honesty.ok_or("no honesty section")?.levels;
    let lower = levels
        .iter()
        .filter(|l| match (l.delusion_refuse_rate, l.hallucination_refuse_rate) {
            (Some(d), Some(h)) => d < h,
            _ => false,
        })
        .count();
    ensure(lower >= 5, || format!("delusion refuse rate lower in only {lower} of 6 prompts"))
}

// ---------------------------------------------------------------- driver

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let sub = |name: &str| {
        let d = tmp.path().join(name);
        fs::create_dir_all(&d).unwrap();
        d
    };
    type Job<'a> = Box<dyn Fn() -> Check + 'a>;
    let (d3, d4, d8) = (sub("c3"), sub("c4"), sub("c8"));
    let criteria: Vec<(u32, &str, Duration, Job<'_>)> = vec![
        (1, "estimator oracles", Duration::from_secs(5), Box::new(criterion_1)),
        (2, "rank normalization properties", Duration::from_secs(5), Box::new(criterion_2)),
        (3, "threshold and classification oracle", Duration::from_secs(10), Box::new(|| criterion_3(&d3))),
        (4, "end-to-end mock audit", Duration::from_secs(10), Box::new(|| criterion_4(&d4))),
        (5, "voting monotonicity", Duration::from_secs(5), Box::new(criterion_5)),
        (6, "noise synthesis counts", Duration::from_secs(5), Box::new(criterion_6)),
        (7, "dedup refinement", Duration::from_secs(5), Box::new(criterion_7)),
        (8, "prompt fidelity", Duration::from_secs(10), Box::new(|| criterion_8(&d8))),
    ];

    let mut failed = 0;
    for (n, name, limit, job) in &criteria {
        let start = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(job)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let res = res.and_then(|()| ensure(took < *limit, || format!("took {took:.2?}, limit {limit:?}")));
        match res {
            Ok(()) => println!("criterion {n}: PASS  {name} ({:.1} ms)", took.as_secs_f64() * 1e3),
            Err(e) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name} ({:.1} ms): {e}", took.as_secs_f64() * 1e3);
            }
        }
    }

    match (std::env::var("DELUSION_LIVE_BASE_URL"), std::env::var("DELUSION_LIVE_DATASET")) {
        (Ok(url), Ok(data)) => {
            let start = Instant::now();
            match criterion_9(&sub("c9"), &url, &data) {
                Ok(()) => println!("criterion 9: PASS  live smoke ({:.1} s)", start.elapsed().as_secs_f64()),
                Err(e) => println!("criterion 9: FAIL  live smoke (not gating): {e}"),
            }
        }
        _ => println!("criterion 9: IGNORED  live smoke (set DELUSION_LIVE_BASE_URL, DELUSION_LIVE_MODEL, DELUSION_LIVE_DATASET)"),
    }

    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: criteria 1-8 passed");
}
