//! Run-level metrics and their JSON, CSV and markdown renderings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::ThresholdSpec;
use crate::error::{Error, Result};
use crate::protocols::{HonestySummary, RagSummary, ReflectionSummary, VoteSummary};
use crate::types::{AuditRecord, Classification, Outcome, ScoreKey};

/// Metrics for one method (or the ensemble). Rates are fractions; `None`
/// means the denominator was zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub n_items: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub n_rejected: usize,
    pub n_delusion: usize,
    pub n_hallucination: usize,
    /// Incorrect answers left unclassified (no threshold).
    pub n_pending: usize,
    pub accuracy: Option<f64>,
    pub error_rate: Option<f64>,
    pub reject_rate: Option<f64>,
    pub delusion_rate_overall: Option<f64>,
    pub delusion_share_of_errors: Option<f64>,
    pub threshold: Option<f64>,
    pub n_correct_used: Option<usize>,
    pub normalized: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSections {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub honesty: Option<HonestySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voting: Option<VoteSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag: Option<RagSummary>,
}

impl ProtocolSections {
    fn is_empty(&self) -> bool {
        self == &Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub model_name: String,
    pub dataset_tag: String,
    pub primary: ScoreKey,
    pub per_method: BTreeMap<ScoreKey, MethodMetrics>,
    #[serde(default, skip_serializing_if = "ProtocolSections::is_empty")]
    pub protocol_sections: ProtocolSections,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Single dataset tag shared by all records.
pub fn dataset_tag(records: &[AuditRecord]) -> Result<String> {
    let tags: BTreeSet<&str> = records.iter().map(|r| r.item.source.as_str()).collect();
    match tags.len() {
        0 => Err(Error::Contract("cannot aggregate an empty run".into())),
        1 => Ok(tags.into_iter().next().unwrap().to_string()),
        _ => Err(Error::Contract(format!(
            "records mix dataset tags: {}",
            tags.into_iter().collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Counts verdicts per method into a report.
pub fn aggregate(
    run_id: &str,
    model_name: &str,
    primary: ScoreKey,
    records: &[AuditRecord],
    thresholds: &[ThresholdSpec],
) -> Result<RunReport> {
    let dataset_tag = dataset_tag(records)?;
    let keys: BTreeSet<ScoreKey> = records.iter().flat_map(|r| r.method_verdicts.keys().copied()).collect();
    let mut per_method = BTreeMap::new();
    for key in keys {
        let mut m = MethodMetrics {
            n_items: records.len(),
            n_correct: 0,
            n_incorrect: 0,
            n_rejected: 0,
            n_delusion: 0,
            n_hallucination: 0,
            n_pending: 0,
            accuracy: None,
            error_rate: None,
            reject_rate: None,
            delusion_rate_overall: None,
            delusion_share_of_errors: None,
            threshold: None,
            n_correct_used: None,
            normalized: None,
        };
        for r in records {
            let v = r
                .verdict_for(key)
                .ok_or_else(|| Error::Data(format!("item {} has no verdict for {key}", r.item.id)))?;
            match v.outcome {
                Outcome::Correct => m.n_correct += 1,
                Outcome::Incorrect => m.n_incorrect += 1,
                Outcome::Rejected => m.n_rejected += 1,
            }
            match v.classification {
                Classification::Delusion => m.n_delusion += 1,
                Classification::Hallucination => m.n_hallucination += 1,
                Classification::Pending => m.n_pending += 1,
                Classification::None => {}
            }
        }
        let n = m.n_items;
        m.accuracy = ratio(m.n_correct, n);
        m.error_rate = ratio(m.n_incorrect, n);
        m.reject_rate = ratio(m.n_rejected, n);
        m.delusion_rate_overall = ratio(m.n_delusion, n);
        m.delusion_share_of_errors = ratio(m.n_delusion, m.n_incorrect);
        if let Some(t) = thresholds.iter().find(|t| t.key == key) {
            m.threshold = Some(t.threshold);
            m.n_correct_used = Some(t.n_correct_used);
            m.normalized = Some(t.normalized);
        }
        per_method.insert(key, m);
    }
    Ok(RunReport {
        run_id: run_id.to_string(),
        model_name: model_name.to_string(),
        dataset_tag,
        primary,
        per_method,
        protocol_sections: ProtocolSections::default(),
    })
}

// ---------------------------------------------------------------- comparison

/// Metrics compared between runs, with the direction that counts as worse.
const COMPARED: [(&str, Direction); 5] = [
    ("accuracy", Direction::LowerIsWorse),
    ("error_rate", Direction::HigherIsWorse),
    ("reject_rate", Direction::Neutral),
    ("delusion_rate_overall", Direction::HigherIsWorse),
    ("delusion_share_of_errors", Direction::HigherIsWorse),
];

#[derive(Clone, Copy)]
enum Direction {
    LowerIsWorse,
    HigherIsWorse,
    Neutral,
}

fn metric(m: &MethodMetrics, name: &str) -> Option<f64> {
    match name {
        "accuracy" => m.accuracy,
        "error_rate" => m.error_rate,
        "reject_rate" => m.reject_rate,
        "delusion_rate_overall" => m.delusion_rate_overall,
        "delusion_share_of_errors" => m.delusion_share_of_errors,
        "threshold" => m.threshold,
        "n_items" => Some(m.n_items as f64),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub method: ScoreKey,
    pub metric: String,
    pub before: Option<f64>,
    pub after: Option<f64>,
    /// after − before, absolute.
    pub delta: Option<f64>,
    pub worsened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_tag: String,
    pub before_run: String,
    pub after_run: String,
    pub rows: Vec<DeltaRow>,
}

impl Comparison {
    pub fn worsened(&self) -> impl Iterator<Item = &DeltaRow> {
        self.rows.iter().filter(|r| r.worsened)
    }
}

/// Per-metric deltas over the methods both reports share.
pub fn compare_runs(before: &RunReport, after: &RunReport) -> Result<Comparison> {
    if before.dataset_tag != after.dataset_tag {
        return Err(Error::Contract(format!(
            "cannot compare runs on different datasets ({} vs {})",
            before.dataset_tag, after.dataset_tag
        )));
    }
    let mut rows = Vec::new();
    for (key, b) in &before.per_method {
        let Some(a) = after.per_method.get(key) else {
            continue;
        };
        for (name, dir) in COMPARED {
            let (bv, av) = (metric(b, name), metric(a, name));
            let delta = bv.zip(av).map(|(b, a)| a - b);
            let worsened = match (dir, delta) {
                (Direction::LowerIsWorse, Some(d)) => d < 0.0,
                (Direction::HigherIsWorse, Some(d)) => d > 0.0,
                _ => false,
            };
            rows.push(DeltaRow {
                method: *key,
                metric: name.to_string(),
                before: bv,
                after: av,
                delta,
                worsened,
            });
        }
    }
    Ok(Comparison {
        dataset_tag: before.dataset_tag.clone(),
        before_run: before.run_id.clone(),
        after_run: after.run_id.clone(),
        rows,
    })
}

// ---------------------------------------------------------------- emit

/// Metrics written per method in the CSV.
pub const CSV_METRICS: [&str; 7] = [
    "accuracy",
    "error_rate",
    "reject_rate",
    "delusion_rate_overall",
    "delusion_share_of_errors",
    "threshold",
    "n_items",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn to_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["method", "metric", "value"]).map_err(err)?;
    for (key, m) in &report.per_method {
        for name in CSV_METRICS {
            let v = metric(m, name).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([key.to_string().as_str(), name, &v]).map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", v * 100.0))
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
}

/// Markdown summary: methods as columns, delusion ratios as paired cells.
pub fn to_markdown(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run {}\n", report.run_id);
    let _ = writeln!(
        out,
        "Model: {}  \nDataset: {}  \nPrimary method: {}\n",
        report.model_name, report.dataset_tag, report.primary
    );
    let mut header = vec!["Metric".to_string()];
    header.extend(report.per_method.keys().map(ToString::to_string));
    let row = |label: &str, f: &dyn Fn(&MethodMetrics) -> String| -> Vec<String> {
        let mut r = vec![label.to_string()];
        r.extend(report.per_method.values().map(f));
        r
    };
    let rows = vec![
        row("Accuracy (%)", &|m| pct(m.accuracy)),
        row("ER (%)", &|m| pct(m.error_rate)),
        row("Reject (%)", &|m| pct(m.reject_rate)),
        row("Delusion overall / in errors (%)", &|m| {
            format!("{} / {}", pct(m.delusion_rate_overall), pct(m.delusion_share_of_errors))
        }),
        row("Threshold", &|m| num(m.threshold)),
        row("Items", &|m| m.n_items.to_string()),
    ];
    table(&mut out, &header, &rows);

    let p = &report.protocol_sections;
    if let Some(h) = &p.honesty {
        let _ = writeln!(out, "\n## Honesty prompts ({})\n", h.method);
        let header: Vec<String> = ["Prompt", "Delusion refuse (%)", "Hallucination refuse (%)", "ER (%)"]
            .map(String::from)
            .to_vec();
        let rows: Vec<Vec<String>> = h
            .levels
            .iter()
            .map(|l| {
                vec![
                    l.level.tag().to_string(),
                    pct(l.delusion_refuse_rate),
                    pct(l.hallucination_refuse_rate),
                    pct(l.error_rate),
                ]
            })
            .collect();
        table(&mut out, &header, &rows);
    }
    if let Some(r) = &p.reflection {
        let _ = writeln!(out, "\n## Reflection\n");
        let header: Vec<String> = ["Baseline", "N", "Insist", "Revised correct", "Revised incorrect", "Revised reject", "Insist (%)"]
            .map(String::from)
            .to_vec();
        let rows: Vec<Vec<String>> = [("all", &r.overall), ("delusion", &r.delusion), ("hallucination", &r.hallucination)]
            .iter()
            .map(|(name, c)| {
                vec![
                    name.to_string(),
                    c.n.to_string(),
                    c.insist.to_string(),
                    c.revised_correct.to_string(),
                    c.revised_incorrect.to_string(),
                    c.revised_reject.to_string(),
                    pct(c.insist_rate),
                ]
            })
            .collect();
        table(&mut out, &header, &rows);
    }
    if let Some(v) = &p.voting {
        let _ = writeln!(
            out,
            "\n## Voting\n\nThreshold {} of {} verifiers: {} of {} answers discarded ({} verifier failures).",
            v.threshold, v.n_verifiers, v.n_discarded, v.n_voted, v.n_verifier_failures
        );
    }
    if let Some(r) = &p.rag {
        let _ = writeln!(
            out,
            "\n## Retrieval\n\n{} items; {} without exactly 20 passages.",
            r.n_items, r.n_unexpected_passage_count
        );
    }
    out
}

pub fn comparison_markdown(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {} vs {} ({})\n", c.after_run, c.before_run, c.dataset_tag);
    let header: Vec<String> = ["Method", "Metric", "Before (%)", "After (%)", "Delta (points)", "Worsened"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = c
        .rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.metric.clone(),
                pct(r.before),
                pct(r.after),
                r.delta.map_or("n/a".into(), |d| format!("{:+.1}", d * 100.0)),
                if r.worsened { "yes".into() } else { String::new() },
            ]
        })
        .collect();
    table(&mut out, &header, &rows);
    out
}

/// Writes report.{json,csv,md} for the requested formats into `dir`.
pub fn emit(report: &RunReport, formats: &[Format], dir: &Path) -> Result<()> {
    for f in formats {
        match f {
            Format::Json => write(&dir.join("report.json"), &to_json(report)?)?,
            Format::Csv => write(&dir.join("report.csv"), &to_csv(report)?)?,
            Format::Markdown => write(&dir.join("report.md"), &to_markdown(report))?,
        }
    }
    Ok(())
}
