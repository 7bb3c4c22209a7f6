//! Pipeline configuration: JSON file, defaults, and flag overrides.
//!
//! Precedence is defaults < config file < command-line flags. Every leaf key
//! has a flag; unknown keys in the file are rejected so typos surface as
//! config errors instead of silently keeping a default.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use tether_core::reranker::{Block, FeatureConfig, PositionalPolicy, RerankTrainConfig, TransformerConfig};
use tether_core::retriever::RetrieverTrainConfig;
use tether_core::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub kb: PathBuf,
    pub mentions_train: PathBuf,
    pub mentions_dev: PathBuf,
    pub mentions_test: PathBuf,
    /// Optional token-vector text file (one `token v1 .. vd` line per token,
    /// `.gz` accepted). Without it embeddings are seeded at random.
    pub embeddings: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            kb: "kb.jsonl".into(),
            mentions_train: "mentions.train.jsonl".into(),
            mentions_dev: "mentions.dev.jsonl".into(),
            mentions_test: "mentions.test.jsonl".into(),
            embeddings: None,
            workdir: "workdir".into(),
        }
    }
}

/// Reranker transformer shape. Vocabulary size and init seed are not
/// configuration: the first comes from the ingested corpus, the second from
/// the pipeline seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerSection {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for TransformerSection {
    fn default() -> Self {
        TransformerSection { layers: 2, heads: 4, d_model: 64, d_ff: 256, max_seq_len: 256, dropout: 0.1 }
    }
}

impl TransformerSection {
    pub fn to_core(self, vocab_size: usize, seed: u64) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            dropout: self.dropout,
            seed,
        }
    }

    fn validate(&self) -> Result<(), Error> {
        // Full validation happens in the core config; this catches the shape
        // errors early, before any corpus loading.
        self.to_core(1, 0).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub retriever: RetrieverTrainConfig,
    pub transformer: TransformerSection,
    pub reranker: RerankTrainConfig,
    pub features: FeatureConfig,
    pub policy: PositionalPolicy,
    /// Retrieval depth: how many candidates each mention gets.
    pub k: usize,
    /// Rank-token budget of the vocabulary; `k` may not exceed it.
    pub k_max: usize,
    /// Word-embedding dimension when no embeddings file is given.
    pub dim_embed: usize,
    /// Category-embedding dimension of the entity encoder.
    pub dim_cat: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// Worker-thread cap; absent means one worker per core, or one worker
    /// total in deterministic mode.
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: PathsConfig::default(),
            retriever: RetrieverTrainConfig::default(),
            transformer: TransformerSection::default(),
            reranker: RerankTrainConfig::default(),
            features: FeatureConfig::default(),
            policy: PositionalPolicy::default(),
            k: 100,
            k_max: 100,
            dim_embed: 64,
            dim_cat: 16,
            seed: 0,
            deterministic: false,
            threads: None,
        }
    }
}

/// Stage-seed offsets, so one pipeline seed drives every random draw without
/// any two stages sharing a stream. The `seed` fields nested inside the
/// retriever and reranker sections are ignored; the pipeline seed wins.
pub mod seeds {
    pub const SYNTH: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const EMBEDDINGS: u64 = 2;
    pub const RETRIEVER: u64 = 3;
    pub const TRANSFORMER: u64 = 4;
    pub const RERANK_TRAIN: u64 = 5;
    pub const NEGATIVES: u64 = 6;
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.k > self.k_max {
            return Err(Error::Config(format!(
                "k = {} exceeds the rank-token budget k_max = {}",
                self.k, self.k_max
            )));
        }
        if self.dim_embed == 0 || self.dim_cat == 0 {
            return Err(Error::Config("dim_embed and dim_cat must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive when set".into()));
        }
        self.retriever.validate()?;
        self.transformer.validate()?;
        self.reranker.validate()?;
        self.features.validate()?;
        Ok(())
    }

    pub fn effective_threads(&self) -> Option<usize> {
        self.threads.or(if self.deterministic { Some(1) } else { None })
    }
}

fn parse_policy(s: &str) -> Result<PositionalPolicy, String> {
    match s {
        "full" => Ok(PositionalPolicy::Full),
        "no-bow" => Ok(PositionalPolicy::NoBow),
        "no-pos-mention" => Ok(PositionalPolicy::NoSegment(Block::Mention)),
        "no-pos-doc-mentions" => Ok(PositionalPolicy::NoSegment(Block::DocMentions)),
        "no-pos-doc-bow" => Ok(PositionalPolicy::NoSegment(Block::DocBow)),
        "no-pos-rank" => Ok(PositionalPolicy::NoSegment(Block::Rank)),
        "no-pos-entity" => Ok(PositionalPolicy::NoSegment(Block::Entity)),
        other => Err(format!(
            "unknown policy `{other}` (expected full, no-bow, or no-pos-{{mention,doc-mentions,doc-bow,rank,entity}})"
        )),
    }
}

/// Every config key as a flag. All of these are global: they may appear
/// before or after the subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file; flags override its keys
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Knowledge-base JSONL path
    #[arg(long, global = true, value_name = "PATH")]
    pub kb: Option<PathBuf>,
    /// Training-split mentions JSONL path
    #[arg(long, global = true, value_name = "PATH")]
    pub mentions_train: Option<PathBuf>,
    /// Dev-split mentions JSONL path
    #[arg(long, global = true, value_name = "PATH")]
    pub mentions_dev: Option<PathBuf>,
    /// Test-split mentions JSONL path
    #[arg(long, global = true, value_name = "PATH")]
    pub mentions_test: Option<PathBuf>,
    /// Pretrained token-vector file (text, optionally .gz)
    #[arg(long, global = true, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// Directory all artifacts are written under
    #[arg(long, global = true, value_name = "PATH")]
    pub workdir: Option<PathBuf>,

    /// Retrieval depth (candidates per mention)
    #[arg(long, global = true, value_name = "N")]
    pub k: Option<usize>,
    /// Rank-token budget of the vocabulary
    #[arg(long, global = true, value_name = "N")]
    pub k_max: Option<usize>,
    /// Word-embedding dimension for randomly seeded embeddings
    #[arg(long, global = true, value_name = "N")]
    pub dim_embed: Option<usize>,
    /// Category-embedding dimension
    #[arg(long, global = true, value_name = "N")]
    pub dim_cat: Option<usize>,
    /// Pipeline seed; every stage derives its randomness from it
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Bitwise-reproducible mode; with no --threads it also caps workers at 1
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub deterministic: Option<bool>,
    /// Worker-thread cap
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Retriever: shared embedding-space dimension
    #[arg(long, global = true, value_name = "N")]
    pub retriever_d_shared: Option<usize>,
    /// Retriever: tower hidden width
    #[arg(long, global = true, value_name = "N")]
    pub retriever_hidden: Option<usize>,
    /// Retriever: learning rate
    #[arg(long, global = true, value_name = "X")]
    pub retriever_lr: Option<f64>,
    /// Retriever: in-batch softmax batch size
    #[arg(long, global = true, value_name = "N")]
    pub retriever_batch_size: Option<usize>,
    /// Retriever: rounds of in-batch training
    #[arg(long, global = true, value_name = "N")]
    pub retriever_in_batch_rounds: Option<usize>,
    /// Retriever: rounds of hard-negative mining plus training
    #[arg(long, global = true, value_name = "N")]
    pub retriever_hard_rounds: Option<usize>,
    /// Retriever: hard negatives mined per mention
    #[arg(long, global = true, value_name = "N")]
    pub retriever_k_neg: Option<usize>,
    /// Retriever: softmax temperature
    #[arg(long, global = true, value_name = "X")]
    pub retriever_tau: Option<f64>,
    /// Retriever: epochs per training round
    #[arg(long, global = true, value_name = "N")]
    pub retriever_epochs_per_round: Option<usize>,
    /// Retriever: held-out fraction for per-round recall
    #[arg(long, global = true, value_name = "X")]
    pub retriever_holdout_fraction: Option<f64>,

    /// Reranker: encoder layers
    #[arg(long, global = true, value_name = "N")]
    pub layers: Option<usize>,
    /// Reranker: attention heads
    #[arg(long, global = true, value_name = "N")]
    pub heads: Option<usize>,
    /// Reranker: model width
    #[arg(long, global = true, value_name = "N")]
    pub d_model: Option<usize>,
    /// Reranker: feed-forward width
    #[arg(long, global = true, value_name = "N")]
    pub d_ff: Option<usize>,
    /// Reranker: maximum input length in tokens
    #[arg(long, global = true, value_name = "N")]
    pub max_seq_len: Option<usize>,
    /// Reranker: dropout probability
    #[arg(long, global = true, value_name = "X")]
    pub dropout: Option<f64>,

    /// Reranker training: learning rate
    #[arg(long, global = true, value_name = "X")]
    pub reranker_lr: Option<f64>,
    /// Reranker training: batch size
    #[arg(long, global = true, value_name = "N")]
    pub reranker_batch_size: Option<usize>,
    /// Reranker training: epochs
    #[arg(long, global = true, value_name = "N")]
    pub reranker_epochs: Option<usize>,
    /// Reranker training: warmup fraction of total steps
    #[arg(long, global = true, value_name = "X")]
    pub reranker_warmup_frac: Option<f64>,
    /// Reranker training: negatives kept per mention (0 keeps all)
    #[arg(long, global = true, value_name = "N")]
    pub reranker_n_neg: Option<usize>,

    /// Feature: mention span tokens
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub use_span: Option<bool>,
    /// Feature: local sentence around the span
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub use_local_ctx: Option<bool>,
    /// Feature: other mention surfaces from the document
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub use_doc_mentions: Option<bool>,
    /// Feature: document bag of words
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub use_doc_bow: Option<bool>,
    /// Feature: entity title
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub use_entity_name: Option<bool>,
    /// Feature: entity description
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub use_entity_desc: Option<bool>,
    /// Feature: retrieval-rank token
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    pub use_rank_token: Option<bool>,

    /// Positional policy: full, no-bow, or no-pos-<block>
    #[arg(long, global = true, value_parser = parse_policy, value_name = "POLICY")]
    pub policy: Option<PositionalPolicy>,
}

impl Overrides {
    /// Resolves defaults, the config file, and the flags into one config.
    pub fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:expr => $target:expr;)*) => {
                $(if let Some(v) = $field.clone() { $target = v; })*
            };
        }
        set! {
            self.kb => cfg.paths.kb;
            self.mentions_train => cfg.paths.mentions_train;
            self.mentions_dev => cfg.paths.mentions_dev;
            self.mentions_test => cfg.paths.mentions_test;
            self.workdir => cfg.paths.workdir;
            self.k => cfg.k;
            self.k_max => cfg.k_max;
            self.dim_embed => cfg.dim_embed;
            self.dim_cat => cfg.dim_cat;
            self.seed => cfg.seed;
            self.deterministic => cfg.deterministic;
            self.retriever_d_shared => cfg.retriever.d_shared;
            self.retriever_hidden => cfg.retriever.hidden;
            self.retriever_lr => cfg.retriever.lr;
            self.retriever_batch_size => cfg.retriever.batch_size;
            self.retriever_in_batch_rounds => cfg.retriever.in_batch_rounds;
            self.retriever_hard_rounds => cfg.retriever.hard_rounds;
            self.retriever_k_neg => cfg.retriever.k_neg;
            self.retriever_tau => cfg.retriever.tau;
            self.retriever_epochs_per_round => cfg.retriever.epochs_per_round;
            self.retriever_holdout_fraction => cfg.retriever.holdout_fraction;
            self.layers => cfg.transformer.layers;
            self.heads => cfg.transformer.heads;
            self.d_model => cfg.transformer.d_model;
            self.d_ff => cfg.transformer.d_ff;
            self.max_seq_len => cfg.transformer.max_seq_len;
            self.dropout => cfg.transformer.dropout;
            self.reranker_lr => cfg.reranker.lr;
            self.reranker_batch_size => cfg.reranker.batch_size;
            self.reranker_epochs => cfg.reranker.epochs;
            self.reranker_warmup_frac => cfg.reranker.warmup_frac;
            self.use_span => cfg.features.use_span;
            self.use_local_ctx => cfg.features.use_local_ctx;
            self.use_doc_mentions => cfg.features.use_doc_mentions;
            self.use_doc_bow => cfg.features.use_doc_bow;
            self.use_entity_name => cfg.features.use_entity_name;
            self.use_entity_desc => cfg.features.use_entity_desc;
            self.use_rank_token => cfg.features.use_rank_token;
            self.policy => cfg.policy;
        }
        if let Some(p) = &self.embeddings {
            cfg.paths.embeddings = Some(p.clone());
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(n) = self.reranker_n_neg {
            cfg.reranker.n_neg = if n == 0 { None } else { Some(n) };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn k_beyond_the_rank_budget_is_rejected() {
        let cfg = PipelineConfig { k: 101, k_max: 100, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_file_round_trips_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = PipelineConfig { k: 10, seed: 7, ..Default::default() };
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);

        std::fs::write(&path, r#"{"kk": 10}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = PipelineConfig { k: 10, seed: 7, ..Default::default() };
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

        let ov = Overrides {
            config: Some(path),
            k: Some(25),
            use_doc_bow: Some(false),
            reranker_n_neg: Some(0),
            policy: Some(PositionalPolicy::NoBow),
            ..Default::default()
        };
        let resolved = ov.resolve().unwrap();
        assert_eq!(resolved.k, 25);
        assert_eq!(resolved.seed, 7);
        assert!(!resolved.features.use_doc_bow);
        assert_eq!(resolved.reranker.n_neg, None);
        assert_eq!(resolved.policy, PositionalPolicy::NoBow);
    }

    #[test]
    fn deterministic_mode_caps_workers_when_threads_is_unset() {
        let mut cfg = PipelineConfig { deterministic: true, ..Default::default() };
        assert_eq!(cfg.effective_threads(), Some(1));
        cfg.threads = Some(4);
        assert_eq!(cfg.effective_threads(), Some(4));
        cfg.deterministic = false;
        cfg.threads = None;
        assert_eq!(cfg.effective_threads(), None);
    }

    #[test]
    fn policy_names_parse() {
        assert_eq!(parse_policy("full").unwrap(), PositionalPolicy::Full);
        assert_eq!(parse_policy("no-bow").unwrap(), PositionalPolicy::NoBow);
        assert_eq!(
            parse_policy("no-pos-rank").unwrap(),
            PositionalPolicy::NoSegment(Block::Rank)
        );
        assert!(parse_policy("sideways").is_err());
    }
}
