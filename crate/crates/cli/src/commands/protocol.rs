use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use delusion_core::client::{Client, EndpointConfig};
use delusion_core::pipeline::format_prompts;
use delusion_core::prompts::HonestyPrompt;
use delusion_core::protocols::{
    apply_votes, honesty_battery, honesty_planned, reflect_all, reflection_planned, summarize_reflection,
    summarize_votes, verifier_planned, vote_all, VoteConfig,
};
use delusion_core::records::save_records;
use delusion_core::report::{aggregate, compare_runs, comparison_markdown, dataset_tag, emit, to_json, Format, RunReport};
use delusion_core::types::{QAItem, ScoreKey};
use delusion_core::Error;

use super::{create_run_dir, write_jsonl, write_text, Baseline, Context};
use crate::config::{EndpointArgs, GradingArgs, RunConfig};

#[derive(Debug, Clone, Args)]
pub struct HonestyArgs {
    /// Finished audit run directory (or its records.jsonl).
    #[arg(long)]
    pub baseline: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[command(flatten)]
    pub grading: GradingArgs,
    /// Labels to use; defaults to the baseline's primary method.
    #[arg(long)]
    pub method: Option<ScoreKey>,
    /// Re-ask every item, not only the baseline errors.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md")]
    pub formats: Vec<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct ReflectArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[command(flatten)]
    pub grading: GradingArgs,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md")]
    pub formats: Vec<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct DebateArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    /// Verifier as MODEL@BASE_URL; repeat for each verifier.
    #[arg(long = "verifier")]
    pub verifiers: Vec<String>,
    /// Matching verifiers needed to keep an answer; defaults to all of them.
    #[arg(long)]
    pub threshold: Option<usize>,
    /// Environment variable holding the verifiers' API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Items voted on concurrently.
    #[arg(long, default_value_t = 4)]
    pub parallel: usize,
    #[command(flatten)]
    pub grading: GradingArgs,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md")]
    pub formats: Vec<Format>,
}

fn base_report(base: &Baseline, run_id: &str) -> Result<RunReport> {
    let mut r = match &base.report {
        Some(r) => r.clone(),
        None => aggregate(
            &base.run_id(),
            &base.model_name(),
            base.primary(),
            &base.records,
            &base.thresholds(),
        )?,
    };
    r.run_id = run_id.to_string();
    Ok(r)
}

fn ensure_nonempty(base: &Baseline) -> Result<()> {
    if base.records.is_empty() {
        return Err(Error::Contract(format!("baseline {} has no records", base.dir.display())).into());
    }
    Ok(())
}

pub fn honesty(ctx: &Context, args: &HonestyArgs) -> Result<()> {
    let base = Baseline::load(&args.baseline)?;
    ensure_nonempty(&base)?;
    let key = args.method.unwrap_or_else(|| base.primary());
    if args.dry_run {
        print!("{}", format_prompts(&honesty_planned(&base.records, key, args.all)?));
        return Ok(());
    }
    let base_cfg = base.config.as_ref();
    let endpoint = args
        .endpoint
        .resolve(ctx.file.endpoint.as_ref(), base_cfg.and_then(|c| c.endpoint.as_ref()))?;
    let grading = args.grading.resolve(&ctx.file, base_cfg.and_then(|c| c.grading.as_ref()));
    let grader = grading.grader()?;
    let client = Client::connect(endpoint.clone())?;
    let (dir, run_id) = create_run_dir(
        &ctx.output_dir(args.output.as_deref()),
        args.run_dir.as_deref(),
        &dataset_tag(&base.records)?,
        &endpoint.model_name,
        client.now(),
        Some("honesty"),
    )?;
    let mut cfg = RunConfig::new("honesty");
    cfg.endpoint = Some(endpoint.clone());
    cfg.baseline = Some(base.dir.clone());
    cfg.grading = Some(grading);
    cfg.extra = serde_json::json!({ "method": key, "all_items": args.all });
    cfg.save(&dir.join("config.json"))?;

    let (summary, outcomes, traces) = honesty_battery(
        &client,
        &base.records,
        key,
        &HonestyPrompt::all(),
        args.all,
        &grader,
        endpoint.max_parallel,
    )?;
    write_jsonl(&outcomes, &dir.join("honesty.jsonl"))?;
    write_jsonl(&traces, &dir.join("traces.jsonl"))?;
    let mut report = base_report(&base, &run_id)?;
    report.protocol_sections.honesty = Some(summary);
    emit(&report, &args.formats, &dir)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn reflect(ctx: &Context, args: &ReflectArgs) -> Result<()> {
    let base = Baseline::load(&args.baseline)?;
    ensure_nonempty(&base)?;
    if args.dry_run {
        print!("{}", format_prompts(&reflection_planned(&base.records)?));
        return Ok(());
    }
    let base_cfg = base.config.as_ref();
    let endpoint = args
        .endpoint
        .resolve(ctx.file.endpoint.as_ref(), base_cfg.and_then(|c| c.endpoint.as_ref()))?;
    let grading = args.grading.resolve(&ctx.file, base_cfg.and_then(|c| c.grading.as_ref()));
    let grader = grading.grader()?;
    let client = Client::connect(endpoint.clone())?;
    let (dir, run_id) = create_run_dir(
        &ctx.output_dir(args.output.as_deref()),
        args.run_dir.as_deref(),
        &dataset_tag(&base.records)?,
        &endpoint.model_name,
        client.now(),
        Some("reflect"),
    )?;
    let mut cfg = RunConfig::new("reflect");
    cfg.endpoint = Some(endpoint.clone());
    cfg.baseline = Some(base.dir.clone());
    cfg.grading = Some(grading);
    cfg.save(&dir.join("config.json"))?;

    let (outcomes, traces) = reflect_all(&client, &base.records, &grader, endpoint.max_parallel)?;
    write_jsonl(&outcomes, &dir.join("reflection.jsonl"))?;
    write_jsonl(&traces, &dir.join("traces.jsonl"))?;
    let mut report = base_report(&base, &run_id)?;
    report.protocol_sections.reflection = Some(summarize_reflection(&outcomes));
    emit(&report, &args.formats, &dir)?;
    println!("{}", dir.display());
    Ok(())
}

fn parse_verifier(spec: &str, template: Option<&EndpointConfig>, key_env: Option<&str>) -> Result<EndpointConfig> {
    let (model, url) = spec
        .split_once('@')
        .filter(|(m, u)| !m.is_empty() && !u.is_empty())
        .ok_or_else(|| Error::Config(format!("verifier {spec:?} is not MODEL@BASE_URL")))?;
    let mut cfg = match template {
        Some(t) => t.clone(),
        None => EndpointConfig::new(url, model),
    };
    cfg.base_url = url.to_string();
    cfg.model_name = model.to_string();
    if let Some(k) = key_env {
        cfg.api_key_env = Some(k.to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn debate(ctx: &Context, args: &DebateArgs) -> Result<()> {
    let base = Baseline::load(&args.baseline)?;
    ensure_nonempty(&base)?;
    if args.dry_run {
        let items: Vec<QAItem> = base.records.iter().map(|r| r.item.clone()).collect();
        print!("{}", format_prompts(&verifier_planned(&items)?));
        return Ok(());
    }
    let template = base.config.as_ref().and_then(|c| c.endpoint.as_ref());
    let verifiers: Vec<EndpointConfig> = if args.verifiers.is_empty() {
        ctx.file.verifiers.clone().unwrap_or_default()
    } else {
        args.verifiers
            .iter()
            .map(|v| parse_verifier(v, template, args.api_key_env.as_deref()))
            .collect::<Result<_>>()?
    };
    let vote = VoteConfig {
        threshold: args.threshold.or(ctx.file.vote_threshold).unwrap_or(verifiers.len()),
        verifiers,
    };
    vote.validate()?;
    let grading = args
        .grading
        .resolve(&ctx.file, base.config.as_ref().and_then(|c| c.grading.as_ref()));
    let grader = grading.grader()?;
    let clients: Vec<Client> = vote
        .verifiers
        .iter()
        .cloned()
        .map(Client::connect)
        .collect::<delusion_core::Result<_>>()?;

    let model = base.model_name();
    let (dir, run_id) = create_run_dir(
        &ctx.output_dir(args.output.as_deref()),
        args.run_dir.as_deref(),
        &dataset_tag(&base.records)?,
        &model,
        clients[0].now(),
        Some("debate"),
    )?;
    let mut cfg = RunConfig::new("debate");
    cfg.baseline = Some(base.dir.clone());
    cfg.grading = Some(grading);
    cfg.extra = serde_json::to_value(&vote).map_err(|e| Error::Data(e.to_string()))?;
    cfg.save(&dir.join("config.json"))?;

    let votes = vote_all(&base.records, &clients, vote.threshold, &grader, args.parallel)?;
    write_jsonl(&votes, &dir.join("votes.jsonl"))?;
    let after = apply_votes(&base.records, &votes);
    save_records(&after, &dir.join("records.jsonl"))?;

    let before = base_report(&base, &base.run_id())?;
    let mut report = aggregate(&run_id, &model, before.primary, &after, &base.thresholds())?;
    report.protocol_sections.voting = Some(summarize_votes(&votes, vote.threshold, vote.verifiers.len()));
    emit(&report, &args.formats, &dir)?;
    let cmp = compare_runs(&before, &report)?;
    write_text(&dir.join("compare.json"), &to_json(&cmp)?)?;
    write_text(&dir.join("compare.md"), &comparison_markdown(&cmp))?;
    println!("{}", dir.display());
    Ok(())
}
