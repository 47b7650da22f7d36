//! JSON config file, flag overrides and the effective-config snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use delusion_core::client::EndpointConfig;
use delusion_core::grading::{Grader, MatchMode, RefusalLexicon};
use delusion_core::pipeline::AuditOptions;
use delusion_core::prompts::PROMPT_VERSION;
use delusion_core::types::Method;
use delusion_core::Error;
use serde::{Deserialize, Serialize};

/// Endpoint fields as they may appear in a config file; all optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialEndpoint {
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub api_key_env: Option<String>,
    pub request_timeout: Option<f64>,
    pub max_retries: Option<u32>,
    pub max_parallel: Option<usize>,
    pub supports_top_k: Option<bool>,
    pub backoff_base: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub endpoint: Option<PartialEndpoint>,
    pub dataset: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub ensemble_methods: Option<Vec<Method>>,
    pub normalized: Option<bool>,
    pub consistency_n: Option<u32>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub refusal_lexicon: Option<PathBuf>,
    pub strict_match: Option<bool>,
    pub verb1s_own_answer: Option<bool>,
    pub verifiers: Option<Vec<EndpointConfig>>,
    pub vote_threshold: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EndpointArgs {
    /// Endpoint base URL, or mock:<script.json> for the scripted backend.
    #[arg(long)]
    pub base_url: Option<String>,
    /// Model name sent with each request.
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Maximum requests in flight.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Never send top_k (for servers that reject it).
    #[arg(long)]
    pub no_top_k: bool,
    /// Base of the retry backoff in seconds.
    #[arg(long)]
    pub backoff: Option<f64>,
}

impl EndpointArgs {
    /// Layers: `base` (e.g. a baseline run's endpoint), then the file, then flags.
    pub fn resolve(&self, file: Option<&PartialEndpoint>, base: Option<&EndpointConfig>) -> Result<EndpointConfig> {
        let empty = PartialEndpoint::default();
        let f = file.unwrap_or(&empty);
        let base_url = self
            .base_url
            .clone()
            .or_else(|| f.base_url.clone())
            .or_else(|| base.map(|b| b.base_url.clone()))
            .ok_or_else(|| Error::Config("no endpoint: pass --base-url or set endpoint.base_url".into()))?;
        let model = self
            .model
            .clone()
            .or_else(|| f.model_name.clone())
            .or_else(|| base.map(|b| b.model_name.clone()))
            .ok_or_else(|| Error::Config("no model: pass --model or set endpoint.model_name".into()))?;
        let mut cfg = base.cloned().unwrap_or_else(|| EndpointConfig::new(&base_url, &model));
        cfg.base_url = base_url;
        cfg.model_name = model;
        macro_rules! layer {
            ($field:ident, $flag:expr) => {
                if let Some(v) = f.$field.clone() {
                    cfg.$field = v;
                }
                if let Some(v) = $flag {
                    cfg.$field = v;
                }
            };
        }
        layer!(request_timeout, self.timeout);
        layer!(max_retries, self.max_retries);
        layer!(max_parallel, self.parallel);
        layer!(supports_top_k, self.no_top_k.then_some(false));
        layer!(backoff_base, self.backoff);
        if let Some(v) = f.api_key_env.clone() {
            cfg.api_key_env = Some(v);
        }
        if let Some(v) = self.api_key_env.clone() {
            cfg.api_key_env = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradingArgs {
    /// Refusal lexicon file (one phrase per line).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Require exact canonical equality instead of token containment.
    #[arg(long)]
    pub strict_match: bool,
}

/// How answers are graded in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingConfig {
    pub match_mode: MatchMode,
    pub refusal_lexicon: Option<PathBuf>,
}

impl GradingArgs {
    pub fn resolve(&self, file: &FileConfig, base: Option<&GradingConfig>) -> GradingConfig {
        let strict = self.strict_match
            || file.strict_match.unwrap_or(false)
            || base.is_some_and(|b| b.match_mode == MatchMode::Strict);
        GradingConfig {
            match_mode: if strict { MatchMode::Strict } else { MatchMode::Containment },
            refusal_lexicon: self
                .lexicon
                .clone()
                .or_else(|| file.refusal_lexicon.clone())
                .or_else(|| base.and_then(|b| b.refusal_lexicon.clone())),
        }
    }
}

impl GradingConfig {
    pub fn grader(&self) -> Result<Grader> {
        let lexicon = match &self.refusal_lexicon {
            Some(p) => RefusalLexicon::load(p)?,
            None => RefusalLexicon::default(),
        };
        Ok(Grader::new(lexicon, self.match_mode))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScoringArgs {
    /// Comma-separated methods: raw_logits, agreement, p_true, verb_1s, verb_2s.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Add the p_true + agreement + raw_logits ensemble.
    #[arg(long)]
    pub ensemble: bool,
    /// Ensemble over a custom comma-separated method list.
    #[arg(long, value_delimiter = ',', conflicts_with = "ensemble")]
    pub ensemble_methods: Option<Vec<Method>>,
    /// Threshold and ensemble on raw scores instead of rank-normalized ones.
    #[arg(long, conflicts_with = "normalized")]
    pub raw: bool,
    /// Threshold and ensemble on rank-normalized scores (the default).
    #[arg(long)]
    pub normalized: bool,
    /// Samples for the agreement estimator.
    #[arg(long)]
    pub consistency_n: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grade verb_1s by the answer it states itself.
    #[arg(long)]
    pub verb1s_own_answer: bool,
}

pub const DEFAULT_ENSEMBLE: [Method; 3] = [Method::PTrue, Method::Agreement, Method::RawLogits];

impl ScoringArgs {
    pub fn resolve(&self, file: &FileConfig, base: Option<&AuditOptions>, parallelism: usize) -> Result<AuditOptions> {
        let mut o = base.cloned().unwrap_or_default();
        if let Some(m) = &file.methods {
            o.methods = m.clone();
        }
        if let Some(m) = &self.methods {
            o.methods = m.clone();
        }
        if let Some(e) = &file.ensemble_methods {
            o.ensemble_methods = Some(e.clone());
        }
        if self.ensemble {
            o.ensemble_methods = Some(DEFAULT_ENSEMBLE.to_vec());
        }
        if let Some(e) = &self.ensemble_methods {
            o.ensemble_methods = Some(e.clone());
        }
        if let Some(n) = file.normalized {
            o.normalized = n;
        }
        if self.raw {
            o.normalized = false;
        }
        if self.normalized {
            o.normalized = true;
        }
        if let Some(n) = self.consistency_n.or(file.consistency_n) {
            o.consistency_n = n;
        }
        if let Some(s) = self.seed.or(file.seed) {
            o.seed = s;
        }
        if self.verb1s_own_answer || file.verb1s_own_answer.unwrap_or(false) {
            o.verb1s_own_answer = true;
        }
        o.parallelism = parallelism;
        o.validate()?;
        Ok(o)
    }
}

/// Effective configuration of a run, written to `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub prompt_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<AuditOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grading: Option<GradingConfig>,
    /// Command-specific settings.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            prompt_version: PROMPT_VERSION,
            endpoint: None,
            dataset_path: None,
            baseline: None,
            options: None,
            grading: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            .context("reading run config")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = delusion_core::report::to_json(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
