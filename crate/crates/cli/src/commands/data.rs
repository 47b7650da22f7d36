use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use delusion_core::client::EndpointConfig;
use delusion_core::dataset::load_dataset;
use delusion_core::noise::{
    build_refusal_sft_set, dedup_refine, load_chat_records, save_chat_records, save_removals, synthesize_noise_set,
    DelusionExample, Embedder, MockEmbedder, NoiseSpec, RemoteEmbedder, TableEmbedder,
};
use delusion_core::records::RECORD_FORMAT;
use delusion_core::types::Classification;
use delusion_core::Error;

use super::{Baseline, Context};

#[derive(Debug, Clone, Args)]
pub struct NoiseGenArgs {
    /// Clean training dataset JSONL.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Share of items made noisy, in [0, 1].
    #[arg(long)]
    pub proportion: f64,
    /// Noise level 1..=4; level/4 of an item's variants share one wrong answer.
    #[arg(long)]
    pub level: u8,
    /// Noisy variants per selected item.
    #[arg(long, default_value_t = 20)]
    pub variants: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Character edits per wrong answer.
    #[arg(long, default_value_t = 1)]
    pub edits: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    /// Chat-format training set to clean.
    #[arg(long)]
    pub train: PathBuf,
    /// Known delusions: an audit run (directory or records file) or a dataset JSONL.
    #[arg(long)]
    pub delusions: PathBuf,
    /// `mock`, `table:PATH`, or an embeddings endpoint base URL.
    #[arg(long, default_value = "mock")]
    pub embedder: String,
    /// Model name for a remote embedder.
    #[arg(long, default_value = "text-embedding-3-small")]
    pub embed_model: String,
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Cosine similarity above which a sample is removed.
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    /// Embed "question answer" instead of the question alone.
    #[arg(long)]
    pub embed_qa: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Removal report CSV; defaults to `<out>.removals.csv`.
    #[arg(long)]
    pub removals: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SftBuildArgs {
    /// Graded audit run (directory or records file).
    #[arg(long)]
    pub records: PathBuf,
    /// Share of samples whose target is a refusal, in (0, 1).
    #[arg(long)]
    pub refuse_ratio: f64,
    #[arg(long)]
    pub total: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn noise_gen(ctx: &Context, args: &NoiseGenArgs) -> Result<()> {
    let items = load_dataset(&args.dataset)?;
    let mut spec = NoiseSpec::new(args.proportion, args.level, args.seed.or(ctx.file.seed).unwrap_or(0));
    spec.variants_per_item = args.variants;
    spec.edits = args.edits;
    let records = synthesize_noise_set(&items, &spec)?;
    save_chat_records(&records, &args.out)?;
    log::info!("wrote {} records to {}", records.len(), args.out.display());
    println!("{}", args.out.display());
    Ok(())
}

fn is_records_file(path: &Path) -> Result<bool> {
    if path.is_dir() {
        return Ok(true);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    Ok(first.contains(RECORD_FORMAT))
}

fn load_delusions(path: &Path) -> Result<Vec<DelusionExample>> {
    if is_records_file(path)? {
        let base = Baseline::load(path)?;
        let out: Vec<DelusionExample> = base
            .records
            .iter()
            .filter(|r| r.verdict.classification == Classification::Delusion)
            .map(|r| DelusionExample {
                id: r.item.id.clone(),
                question: r.item.question.clone(),
                answer: r.item.primary_answer().to_string(),
            })
            .collect();
        log::info!("{} delusions among {} records", out.len(), base.records.len());
        Ok(out)
    } else {
        Ok(load_dataset(path)?
            .into_iter()
            .map(|i| DelusionExample {
                answer: i.primary_answer().to_string(),
                id: i.id,
                question: i.question,
            })
            .collect())
    }
}

fn embedder(args: &RefineArgs) -> Result<Box<dyn Embedder>> {
    if args.embedder == "mock" {
        return Ok(Box::new(MockEmbedder));
    }
    if let Some(p) = args.embedder.strip_prefix("table:") {
        return Ok(Box::new(TableEmbedder::load(Path::new(p))?));
    }
    let mut cfg = EndpointConfig::new(&args.embedder, &args.embed_model);
    cfg.api_key_env = args.api_key_env.clone();
    Ok(Box::new(RemoteEmbedder::new(cfg)?))
}

pub fn refine(_ctx: &Context, args: &RefineArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::Config(format!("similarity threshold {} outside [0, 1]", args.threshold)).into());
    }
    let records = load_chat_records(&args.train)?;
    let delusions = load_delusions(&args.delusions)?;
    let emb = embedder(args)?;
    let removals_path = args.removals.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".removals.csv");
        PathBuf::from(p)
    });
    match dedup_refine(&records, &delusions, emb.as_ref(), args.threshold, args.embed_qa) {
        Ok(refined) => {
            save_chat_records(&refined.kept, &args.out)?;
            save_removals(&refined.removals, &removals_path)?;
            log::info!(
                "kept {} of {} records; removal report in {}",
                refined.kept.len(),
                records.len(),
                removals_path.display()
            );
            println!("{}", args.out.display());
            Ok(())
        }
        Err(failure) => {
            let mut partial = removals_path.into_os_string();
            partial.push(".partial");
            let partial = PathBuf::from(partial);
            save_removals(&failure.removals, &partial)?;
            eprintln!(
                "refine stopped after {} of {} records; partial removal report in {}",
                failure.processed,
                records.len(),
                partial.display()
            );
            Err(failure.into())
        }
    }
}

pub fn sft_build(ctx: &Context, args: &SftBuildArgs) -> Result<()> {
    let base = Baseline::load(&args.records)?;
    let seed = args.seed.or(ctx.file.seed).unwrap_or(0);
    let set = build_refusal_sft_set(&base.records, args.refuse_ratio, args.total, seed)?;
    save_chat_records(&set, &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}
