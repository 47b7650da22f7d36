use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use delusion_core::report::{
    aggregate, compare_runs, comparison_markdown, emit, load_report, to_json, to_markdown, Format, RunReport,
};
use delusion_core::Error;

use super::{write_text, Baseline};

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directory holding records.jsonl.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md")]
    pub formats: Vec<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Earlier run directory or report.json.
    #[arg(long)]
    pub before: PathBuf,
    /// Later run directory or report.json.
    #[arg(long)]
    pub after: PathBuf,
    /// Directory for compare.json and compare.md.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Rebuilds the report from the run's records, keeping any protocol sections.
pub fn report(args: &ReportArgs) -> Result<()> {
    let base = Baseline::load(&args.run)?;
    let mut report = aggregate(
        &base.run_id(),
        &base.model_name(),
        base.primary(),
        &base.records,
        &base.thresholds(),
    )?;
    if let Some(old) = &base.report {
        report.protocol_sections = old.protocol_sections.clone();
    }
    emit(&report, &args.formats, &base.dir)?;
    print!("{}", to_markdown(&report));
    Ok(())
}

fn report_at(path: &Path) -> Result<RunReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    if !file.exists() {
        return Err(Error::Config(format!("{} not found; run `delusion-audit report` first", file.display())).into());
    }
    Ok(load_report(&file)?)
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let cmp = compare_runs(&report_at(&args.before)?, &report_at(&args.after)?)?;
    let md = comparison_markdown(&cmp);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("compare.json"), &to_json(&cmp)?)?;
        write_text(&dir.join("compare.md"), &md)?;
    }
    print!("{md}");
    Ok(())
}
