pub mod audit;
pub mod data;
pub mod protocol;
pub mod reporting;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use chrono::{DateTime, Utc};
use delusion_core::calibrate::ThresholdSpec;
use delusion_core::records::load_records;
use delusion_core::report::{load_report, RunReport};
use delusion_core::types::{AuditRecord, Method, ScoreKey};
use delusion_core::Error;
use serde::Serialize;

use crate::config::{FileConfig, RunConfig};

pub const DEFAULT_OUTPUT: &str = "runs";

pub struct Context {
    pub file: FileConfig,
}

impl Context {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Ok(Self { file })
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.file.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '-' })
        .collect()
}

/// Creates `{output}/{dataset}_{model}_{timestamp}[_{suffix}]`, or `explicit`.
/// Returns the directory and its run id.
pub fn create_run_dir(
    output: &Path,
    explicit: Option<&Path>,
    dataset: &str,
    model: &str,
    now: DateTime<Utc>,
    suffix: Option<&str>,
) -> Result<(PathBuf, String)> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let mut name = format!("{}_{}_{}", sanitize(dataset), sanitize(model), now.format("%Y%m%dT%H%M%SZ"));
            if let Some(s) = suffix {
                name.push('_');
                name.push_str(s);
            }
            output.join(name)
        }
    };
    if dir.exists() {
        return Err(Error::Config(format!(
            "run directory {} already exists; pass --run-dir or a different --output",
            dir.display()
        ))
        .into());
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let run_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    Ok((dir, run_id))
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A finished audit run on disk.
pub struct Baseline {
    pub dir: PathBuf,
    pub records: Vec<AuditRecord>,
    pub report: Option<RunReport>,
    pub config: Option<RunConfig>,
}

impl Baseline {
    /// Loads a run directory, or a bare records file.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "baseline {} not found; run `delusion-audit audit` first",
                path.display()
            ))
            .into());
        }
        let (dir, records_path) = if path.is_dir() {
            (path.to_path_buf(), path.join("records.jsonl"))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        if !records_path.exists() {
            return Err(Error::Config(format!(
                "{} has no records.jsonl; run `delusion-audit audit` first",
                dir.display()
            ))
            .into());
        }
        let records = load_records(&records_path).with_context(|| format!("loading {}", records_path.display()))?;
        let report_path = dir.join("report.json");
        let report = report_path.exists().then(|| load_report(&report_path)).transpose()?;
        let config_path = dir.join("config.json");
        let config = config_path.exists().then(|| RunConfig::load(&config_path)).transpose()?;
        Ok(Self {
            dir,
            records,
            report,
            config,
        })
    }

    pub fn run_id(&self) -> String {
        match &self.report {
            Some(r) => r.run_id.clone(),
            None => self
                .dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        }
    }

    pub fn model_name(&self) -> String {
        self.report
            .as_ref()
            .map(|r| r.model_name.clone())
            .or_else(|| self.config.as_ref().and_then(|c| c.endpoint.as_ref()).map(|e| e.model_name.clone()))
            .unwrap_or_else(|| "unknown".into())
    }

    pub fn primary(&self) -> ScoreKey {
        self.report
            .as_ref()
            .map(|r| r.primary)
            .or_else(|| self.config.as_ref().and_then(|c| c.options.as_ref()).map(|o| o.primary_key()))
            .unwrap_or(ScoreKey::Method(Method::RawLogits))
    }

    pub fn thresholds(&self) -> Vec<ThresholdSpec> {
        let Some(r) = &self.report else {
            return Vec::new();
        };
        r.per_method
            .iter()
            .filter_map(|(k, m)| {
                Some(ThresholdSpec {
                    key: *k,
                    threshold: m.threshold?,
                    n_correct_used: m.n_correct_used.unwrap_or(0),
                    normalized: m.normalized.unwrap_or(true),
                })
            })
            .collect()
    }
}
