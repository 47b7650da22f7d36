use std::path::PathBuf;

use anyhow::{anyhow, Context as _, Result};
use clap::Args;
use delusion_core::client::Client;
use delusion_core::dataset::load_dataset;
use delusion_core::pipeline::{self, ItemTraces};
use delusion_core::protocols::{rag_request, rag_summary};
use delusion_core::records::save_records;
use delusion_core::report::{aggregate, dataset_tag, emit, Format};
use delusion_core::types::QAItem;
use delusion_core::Error;
use serde::Serialize;

use super::{create_run_dir, write_jsonl, Baseline, Context};
use crate::config::{EndpointArgs, GradingArgs, RunConfig, ScoringArgs};

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    /// Dataset JSONL (id, question, answers[, passages]).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub grading: GradingArgs,
    /// Parent directory for run directories.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Exact run directory to create.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Print every prompt the run would send and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Re-score a finished run (directory or records file) without querying.
    #[arg(long)]
    pub from_records: Option<PathBuf>,
    /// Report formats to write.
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md")]
    pub formats: Vec<Format>,
}

#[derive(Serialize)]
struct PartialItem<'a> {
    item: &'a QAItem,
    traces: &'a [delusion_core::types::GenerationTrace],
}

pub fn run(ctx: &Context, args: &AuditArgs, rag: bool) -> Result<()> {
    if let Some(src) = &args.from_records {
        return rescore(ctx, args, src);
    }
    let command = if rag { "rag" } else { "audit" };
    let dataset_path = args
        .dataset
        .clone()
        .or_else(|| ctx.file.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or set dataset in the config".into()))?;
    let items = load_dataset(&dataset_path)?;
    if rag {
        for it in &items {
            rag_request(it)?;
        }
    }
    let grading = args.grading.resolve(&ctx.file, None);
    let grader = grading.grader()?;
    let parallel = args.endpoint.parallel.unwrap_or(8);
    let mut opts = args.scoring.resolve(&ctx.file, None, parallel)?;
    opts.rag = rag;

    if args.dry_run {
        print!("{}", pipeline::format_prompts(&pipeline::planned_prompts(&items, &opts)?));
        return Ok(());
    }

    let endpoint = args.endpoint.resolve(ctx.file.endpoint.as_ref(), None)?;
    let client = Client::connect(endpoint.clone())?;
    let tag = items.first().map(|i| i.source.clone()).unwrap_or_default();
    let (dir, run_id) = create_run_dir(
        &ctx.output_dir(args.output.as_deref()),
        args.run_dir.as_deref(),
        &tag,
        &endpoint.model_name,
        client.now(),
        rag.then_some("rag"),
    )?;
    let mut cfg = RunConfig::new(command);
    cfg.endpoint = Some(endpoint.clone());
    cfg.dataset_path = Some(dataset_path);
    cfg.options = Some(opts.clone());
    cfg.grading = Some(grading);
    cfg.save(&dir.join("config.json"))?;

    let collected = pipeline::collect_traces(&client, &items, &opts)?;
    if let Some((id, err)) = collected.failed.into_iter().next() {
        let partial: Vec<PartialItem<'_>> = collected
            .done
            .iter()
            .map(|d| PartialItem {
                item: &d.item,
                traces: &d.traces,
            })
            .collect();
        write_jsonl(&partial, &dir.join("partial_traces.jsonl"))?;
        return Err(anyhow!(err).context(format!(
            "item {id} failed; traces for {} finished items saved in {}",
            collected.done.len(),
            dir.display()
        )));
    }

    let scored = pipeline::score(&collected.done, &opts, &grader)?;
    save_records(&scored.records, &dir.join("records.jsonl"))?;
    let mut report = aggregate(&run_id, &endpoint.model_name, opts.primary_key(), &scored.records, &scored.thresholds)?;
    if rag {
        report.protocol_sections.rag = Some(rag_summary(&items));
    }
    emit(&report, &args.formats, &dir)?;
    println!("{}", dir.display());
    Ok(())
}

fn rescore(ctx: &Context, args: &AuditArgs, src: &std::path::Path) -> Result<()> {
    let base = Baseline::load(src)?;
    let base_cfg = base.config.as_ref();
    let grading = args.grading.resolve(&ctx.file, base_cfg.and_then(|c| c.grading.as_ref()));
    let grader = grading.grader()?;
    let base_opts = base_cfg.and_then(|c| c.options.clone());
    let parallel = base_opts.as_ref().map_or(8, |o| o.parallelism);
    let mut opts = args.scoring.resolve(&ctx.file, base_opts.as_ref(), parallel)?;
    opts.rag = base_opts.as_ref().is_some_and(|o| o.rag);

    let items: Vec<ItemTraces> = base
        .records
        .iter()
        .map(|r| ItemTraces {
            item: r.item.clone(),
            traces: r.traces.clone(),
        })
        .collect();
    let scored = pipeline::score(&items, &opts, &grader).context("re-scoring saved traces")?;
    let model = base.model_name();
    let tag = dataset_tag(&base.records)?;
    let latest = base
        .records
        .iter()
        .flat_map(|r| r.traces.iter().map(|t| t.created_at))
        .max()
        .unwrap_or_default();
    let (dir, run_id) = create_run_dir(
        &ctx.output_dir(args.output.as_deref()),
        args.run_dir.as_deref(),
        &tag,
        &model,
        latest,
        Some("rescore"),
    )?;
    let mut cfg = RunConfig::new("audit");
    cfg.endpoint = base_cfg.and_then(|c| c.endpoint.clone());
    cfg.dataset_path = base_cfg.and_then(|c| c.dataset_path.clone());
    cfg.baseline = Some(base.dir.clone());
    cfg.options = Some(opts.clone());
    cfg.grading = Some(grading);
    cfg.save(&dir.join("config.json"))?;

    save_records(&scored.records, &dir.join("records.jsonl"))?;
    let mut report = aggregate(&run_id, &model, opts.primary_key(), &scored.records, &scored.thresholds)?;
    if let Some(r) = &base.report {
        report.protocol_sections.rag = r.protocol_sections.rag.clone();
    }
    emit(&report, &args.formats, &dir)?;
    println!("{}", dir.display());
    Ok(())
}
