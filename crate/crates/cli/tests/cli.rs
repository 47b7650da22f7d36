mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use delusion_core::client::mock::DefaultBehavior;
use delusion_core::client::MockScript;
use delusion_core::estimators::answer_request;
use delusion_core::noise::load_chat_records;
use delusion_core::records::load_records;
use delusion_core::report::load_report;
use delusion_core::types::{Classification, Method, Outcome, ScoreKey};

fn audit10(dir: &Path, extra: &[&str]) -> (TenItem, PathBuf) {
    let ten = fixture10(dir);
    let out = dir.join("runs");
    let url = ten.fixture.base_url();
    let mut args = vec!["audit", "--dataset", p(&ten.fixture.dataset), "--base-url", &url, "--model", "mock-7b", "--output", p(&out)];
    args.extend_from_slice(extra);
    let run = cli_ok(&args).unwrap();
    (ten, PathBuf::from(run.trim()))
}

/// Copy of the fixture script that echoes any unscripted prompt.
fn echo_script(fx: &Fixture) -> String {
    let mut s = MockScript::load(&fx.script).unwrap();
    s.default_behavior = DefaultBehavior::Echo;
    let path = fx.script.with_extension("echo.json");
    s.save(&path).unwrap();
    format!("mock:{}", path.display())
}

#[test]
fn audit_writes_run_directory_named_after_dataset_model_and_clock() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = audit10(tmp.path(), &[]);
    assert_eq!(run.file_name().unwrap(), "fixture10_mock-7b_20240101T000000Z");
    for f in ["config.json", "records.jsonl", "report.json", "report.csv", "report.md"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let md = fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("raw_logits"), "{md}");
}

#[test]
fn second_audit_into_same_directory_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (ten, run) = audit10(tmp.path(), &[]);
    let out = cli(&[
        "audit",
        "--dataset",
        p(&ten.fixture.dataset),
        "--base-url",
        &ten.fixture.base_url(),
        "--model",
        "mock-7b",
        "--run-dir",
        p(&run),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("already exists"));
}

#[test]
fn missing_dataset_and_endpoint_are_config_errors() {
    let out = cli(&["audit", "--base-url", "mock:x", "--model", "m"]);
    assert_eq!(out.status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let ten = fixture10(tmp.path());
    let out = cli(&["audit", "--dataset", p(&ten.fixture.dataset)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--base-url"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"endpoint": {"base_url": "mock:x"}, "colour": "red"}"#).unwrap();
    let out = cli(&["--config", p(&cfg), "report", "--run", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_endpoint_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let ten = fixture10(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    let body = serde_json::json!({
        "endpoint": {"base_url": ten.fixture.base_url(), "model_name": "from-file"},
        "dataset": ten.fixture.dataset,
        "output_dir": tmp.path().join("cfg_runs"),
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let run = cli_ok(&["--config", p(&cfg), "audit", "--model", "from-flag"]).unwrap();
    assert!(run.trim().ends_with("fixture10_from-flag_20240101T000000Z"), "{run}");
    let report = load_report(&Path::new(run.trim()).join("report.json")).unwrap();
    assert_eq!(report.model_name, "from-flag");
}

#[test]
fn failed_item_leaves_partial_traces_and_transport_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let ten = fixture10(tmp.path());
    let mut script = MockScript::load(&ten.fixture.script).unwrap();
    let msgs = answer_request("t05", "What is the code word number 5?").unwrap().messages;
    script.fail_permanently(&msgs, "model overloaded");
    script.save(&ten.fixture.script).unwrap();
    let run = tmp.path().join("run");
    let out = cli(&[
        "audit",
        "--dataset",
        p(&ten.fixture.dataset),
        "--base-url",
        &ten.fixture.base_url(),
        "--model",
        "m",
        "--run-dir",
        p(&run),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("t05") && err.contains("model overloaded"), "{err}");
    let partial = fs::read_to_string(run.join("partial_traces.jsonl")).unwrap();
    assert_eq!(partial.lines().count(), 9);
    assert!(!run.join("records.jsonl").exists());
}

#[test]
fn rag_without_passages_is_rejected_before_any_request() {
    let tmp = tempfile::tempdir().unwrap();
    let ten = fixture10(tmp.path());
    let out = cli(&["rag", "--dataset", p(&ten.fixture.dataset), "--base-url", "mock:/nonexistent", "--model", "m"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("passages"));
}

#[test]
fn rescoring_saved_records_reproduces_the_report_without_queries() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = audit10(tmp.path(), &[]);
    let again = tmp.path().join("rescored");
    cli_ok(&["audit", "--from-records", p(&run), "--run-dir", p(&again)]).unwrap();
    let (a, b) = (load_report(&run.join("report.json")).unwrap(), load_report(&again.join("report.json")).unwrap());
    assert_eq!(a.per_method, b.per_method);

    // raw scores change the threshold space but not the error counts
    let raw = tmp.path().join("raw");
    cli_ok(&["audit", "--from-records", p(&run), "--raw", "--run-dir", p(&raw)]).unwrap();
    let c = load_report(&raw.join("report.json")).unwrap();
    let key = ScoreKey::Method(Method::RawLogits);
    assert_eq!(c.per_method[&key].n_incorrect, 3);
    assert_eq!(c.per_method[&key].normalized, Some(false));
}

#[test]
fn honesty_and_reflection_runs_write_their_sections() {
    let tmp = tempfile::tempdir().unwrap();
    let (ten, run) = audit10(tmp.path(), &[]);
    let url = echo_script(&ten.fixture);
    let out = tmp.path().join("proto");

    let hon = cli_ok(&["honesty", "--baseline", p(&run), "--base-url", &url, "--output", p(&out)]).unwrap();
    let hon = PathBuf::from(hon.trim());
    assert!(hon.to_string_lossy().ends_with("_honesty"));
    assert_eq!(fs::read_to_string(hon.join("honesty.jsonl")).unwrap().lines().count(), 6 * 3);
    let report = load_report(&hon.join("report.json")).unwrap();
    let section = report.protocol_sections.honesty.unwrap();
    assert_eq!(section.levels.len(), 6);
    assert!(section.levels.iter().all(|l| l.n_delusion == 2 && l.n_hallucination == 1));

    let refl = cli_ok(&["reflect", "--baseline", p(&run), "--base-url", &url, "--output", p(&out)]).unwrap();
    let refl = PathBuf::from(refl.trim());
    assert_eq!(fs::read_to_string(refl.join("reflection.jsonl")).unwrap().lines().count(), 10);
    let report = load_report(&refl.join("report.json")).unwrap();
    assert_eq!(report.protocol_sections.reflection.unwrap().overall.n, 10);

    // the baseline is untouched
    assert_eq!(load_records(&run.join("records.jsonl")).unwrap().len(), 10);
}

#[test]
fn honesty_without_baseline_points_at_audit() {
    let out = cli(&["honesty", "--baseline", "/nonexistent/run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("audit"));
}

#[test]
fn debate_discards_answers_verifiers_do_not_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let (ten, run) = audit10(tmp.path(), &[]);
    // verifier A repeats every baseline answer; verifier B echoes the prompt
    let records = load_records(&run.join("records.jsonl")).unwrap();
    let mut agree = MockScript::default();
    for r in &records {
        let msgs = delusion_core::protocols::verifier_request(&r.item).unwrap().messages;
        let text = r.answer_trace().unwrap().output_text.clone();
        agree.add_greedy(&msgs, delusion_core::client::ScriptedCompletion::text(text));
    }
    let a = tmp.path().join("a.json");
    agree.save(&a).unwrap();
    let b = tmp.path().join("b.json");
    MockScript::echo().save(&b).unwrap();
    let va = format!("va@mock:{}", a.display());
    let vb = format!("vb@mock:{}", b.display());
    let out = tmp.path().join("debate");

    let one = cli_ok(&["debate", "--baseline", p(&run), "--verifier", &va, "--verifier", &vb, "--threshold", "1", "--output", p(&out)]).unwrap();
    let one = PathBuf::from(one.trim());
    let kept_all = load_report(&one.join("report.json")).unwrap();
    assert_eq!(kept_all.protocol_sections.voting.as_ref().unwrap().n_discarded, 0);

    let both = tmp.path().join("debate2");
    cli_ok(&["debate", "--baseline", p(&run), "--verifier", &va, "--verifier", &vb, "--run-dir", p(&both)]).unwrap();
    let report = load_report(&both.join("report.json")).unwrap();
    let voting = report.protocol_sections.voting.as_ref().unwrap();
    assert_eq!(voting.threshold, 2);
    assert_eq!(voting.n_voted, 9);
    assert_eq!(voting.n_discarded, 9);
    let key = ScoreKey::Method(Method::RawLogits);
    assert_eq!(report.per_method[&key].n_rejected, 10);
    assert_eq!(report.per_method[&key].n_delusion, 0);
    assert!(fs::read_to_string(both.join("compare.md")).unwrap().contains("accuracy"));
    let after = load_records(&both.join("records.jsonl")).unwrap();
    assert!(after.iter().all(|r| r.verdict.outcome == Outcome::Rejected));
    let _ = ten;

    let bad = cli(&["debate", "--baseline", p(&run), "--verifier", &va, "--threshold", "2"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = cli(&["debate", "--baseline", p(&run), "--verifier", "no-at-sign"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn noise_refine_and_sft_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (ten, run) = audit10(tmp.path(), &[]);
    let noisy = tmp.path().join("noisy.jsonl");
    cli_ok(&[
        "noise-gen",
        "--dataset",
        p(&ten.fixture.dataset),
        "--proportion",
        "0.5",
        "--level",
        "2",
        "--seed",
        "3",
        "--out",
        p(&noisy),
    ])
    .unwrap();
    let recs = load_chat_records(&noisy).unwrap();
    assert_eq!(recs.len(), 5 + 5 * 20);
    let again = tmp.path().join("noisy2.jsonl");
    cli_ok(&["noise-gen", "--dataset", p(&ten.fixture.dataset), "--proportion", "0.5", "--level", "2", "--seed", "3", "--out", p(&again)]).unwrap();
    assert_eq!(fs::read(&noisy).unwrap(), fs::read(&again).unwrap());

    let refined = tmp.path().join("refined.jsonl");
    cli_ok(&["refine", "--train", p(&noisy), "--delusions", p(&run), "--out", p(&refined)]).unwrap();
    let kept = load_chat_records(&refined).unwrap();
    let removals = fs::read_to_string(tmp.path().join("refined.jsonl.removals.csv")).unwrap();
    assert_eq!(removals.lines().next().unwrap(), "record_id,trigger,matched_delusion_id,similarity");
    assert_eq!(kept.len() + removals.lines().count() - 1, recs.len());
    // the two delusion questions (t02, t09) are gone in every form
    assert!(kept.iter().all(|r| r.meta.source_id != "t02" && r.meta.source_id != "t09"));

    let sft = tmp.path().join("sft.jsonl");
    cli_ok(&["sft-build", "--records", p(&run), "--refuse-ratio", "0.25", "--total", "8", "--seed", "1", "--out", p(&sft)]).unwrap();
    let set = load_chat_records(&sft).unwrap();
    assert_eq!(set.len(), 8);
    assert_eq!(set.iter().filter(|r| r.answer() == "I don't know").count(), 2);
    let labelled = set.iter().filter(|r| r.meta.label == Some(Classification::Delusion)).count();
    assert!(labelled <= 2);

    let short = cli(&["sft-build", "--records", p(&run), "--refuse-ratio", "0.5", "--total", "10", "--out", p(&sft)]);
    assert_eq!(short.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&short.stderr).contains("refusal side"));
}

#[test]
fn report_and_compare_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let (ten, run) = audit10(tmp.path(), &[]);
    fs::remove_file(run.join("report.csv")).unwrap();
    let md = cli_ok(&["report", "--run", p(&run)]).unwrap();
    assert!(md.contains("raw_logits"));
    assert!(run.join("report.csv").exists());

    let other = tmp.path().join("other");
    cli_ok(&[
        "audit",
        "--dataset",
        p(&ten.fixture.dataset),
        "--base-url",
        &ten.fixture.base_url(),
        "--model",
        "mock-7b",
        "--run-dir",
        p(&other),
    ])
    .unwrap();
    let out = tmp.path().join("cmp");
    let md = cli_ok(&["compare", "--before", p(&run), "--after", p(&other), "--out", p(&out)]).unwrap();
    assert!(md.contains("accuracy"));
    assert!(out.join("compare.json").exists());
    let missing = cli(&["compare", "--before", p(&run), "--after", "/nonexistent"]);
    assert_eq!(missing.status.code(), Some(2));
}
