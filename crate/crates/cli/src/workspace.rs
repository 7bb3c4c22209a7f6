//! Workdir layout and content-addressed artifact names.
//!
//! Every artifact's file name carries a digest of the inputs that produced
//! it: the raw-file digests, the config slice for its stage, and the keys of
//! the artifacts it was built from. Change anything upstream and the name
//! changes with it, so a downstream command can never pick up a stale file;
//! it simply finds nothing and exits asking for the missing stage.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use tether_core::{Error, Result};

use crate::config::{seeds, PipelineConfig};

pub const CHECKPOINTS: &str = "checkpoints";
pub const INDEX: &str = "index";
pub const CANDIDATES: &str = "candidates";
pub const REPORTS: &str = "reports";

/// Short hex digest of a serializable key description.
pub fn key_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("key descriptions always serialize");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let full = hasher.finalize();
    let mut out = String::with_capacity(16);
    for b in &full[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Digest of a raw input file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn mentions_path(self, cfg: &PipelineConfig) -> PathBuf {
        match self {
            Split::Train => cfg.paths.mentions_train.clone(),
            Split::Dev => cfg.paths.mentions_dev.clone(),
            Split::Test => cfg.paths.mentions_test.clone(),
        }
    }
}

/// Resolves artifact paths under the workdir. Construction creates the
/// four subdirectories.
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(cfg: &PipelineConfig) -> Result<Self> {
        let root = cfg.paths.workdir.clone();
        for sub in [CHECKPOINTS, INDEX, CANDIDATES, REPORTS] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Workspace { root })
    }

    pub fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.root.join(sub).join(name)
    }
}

/// The digest chain. Each stage key folds in the previous stage's key, so
/// the final report name pins the entire pipeline that produced it.
pub struct Keys<'a> {
    cfg: &'a PipelineConfig,
}

impl<'a> Keys<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Self {
        Keys { cfg }
    }

    pub fn ingest(&self) -> Result<String> {
        let cfg = self.cfg;
        let embeddings = match &cfg.paths.embeddings {
            Some(p) => Some(file_digest(p)?),
            None => None,
        };
        Ok(key_of(&json!({
            "stage": "ingest",
            "kb": file_digest(&cfg.paths.kb)?,
            "train": file_digest(&cfg.paths.mentions_train)?,
            "dev": file_digest(&cfg.paths.mentions_dev)?,
            "test": file_digest(&cfg.paths.mentions_test)?,
            "embeddings": embeddings,
            "dim_embed": cfg.dim_embed,
            "dim_cat": cfg.dim_cat,
            "k_max": cfg.k_max,
            "seed": cfg.stage_seed(seeds::EMBEDDINGS),
        })))
    }

    pub fn retriever(&self, ingest_key: &str) -> String {
        key_of(&json!({
            "stage": "train-retriever",
            "ingest": ingest_key,
            "config": self.cfg.retriever,
            "seed": self.cfg.stage_seed(seeds::RETRIEVER),
        }))
    }

    pub fn index(&self, retriever_key: &str) -> String {
        key_of(&json!({ "stage": "index", "retriever": retriever_key }))
    }

    pub fn candidates(&self, index_key: &str, split: Split) -> Result<String> {
        Ok(key_of(&json!({
            "stage": "retrieve",
            "index": index_key,
            "split": split.name(),
            "mentions": file_digest(&split.mentions_path(self.cfg))?,
            "k": self.cfg.k,
        })))
    }

    /// The feature set is a parameter because ablation rows train their own
    /// models; a label further separates them from the main reranker.
    pub fn reranker(
        &self,
        train_candidates_key: &str,
        features: &tether_core::reranker::FeatureConfig,
        label: Option<&str>,
    ) -> String {
        let cfg = self.cfg;
        key_of(&json!({
            "stage": "train-reranker",
            "candidates": train_candidates_key,
            "transformer": cfg.transformer,
            "train": {
                "lr": cfg.reranker.lr,
                "batch_size": cfg.reranker.batch_size,
                "epochs": cfg.reranker.epochs,
                "warmup_frac": cfg.reranker.warmup_frac,
                "n_neg": cfg.reranker.n_neg,
            },
            "features": features,
            "policy": cfg.policy,
            "label": label,
            "seed": cfg.stage_seed(seeds::RERANK_TRAIN),
        }))
    }

    pub fn report(&self, candidates_key: &str, reranker_key: Option<&str>, split: Split) -> String {
        key_of(&json!({
            "stage": "evaluate",
            "candidates": candidates_key,
            "reranker": reranker_key,
            "split": split.name(),
        }))
    }

    pub fn link(&self, candidates_key: &str, reranker_key: &str, split: Split) -> String {
        key_of(&json!({
            "stage": "link",
            "candidates": candidates_key,
            "reranker": reranker_key,
            "split": split.name(),
        }))
    }

    pub fn ablation(&self, row_keys: &[(String, String)], candidates_key: &str, split: Split) -> String {
        key_of(&json!({
            "stage": "ablate",
            "rows": row_keys,
            "candidates": candidates_key,
            "split": split.name(),
        }))
    }
}
