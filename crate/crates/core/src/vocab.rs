//! Token vocabulary shared by the reranker and input dumps.
//!
//! Id layout is fixed: PAD=0, UNK=1, CLS=2, SEP=3, MASK=4, then `k_max`
//! rank tokens, then corpus tokens in lexicographic order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const FIRST_RANK: u32 = 5;

pub const MASK_TOKEN: &str = "[MASK]";

pub const DEFAULT_K_MAX: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    k_max: usize,
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds the vocabulary from the full corpus token set.
    pub fn build<I, T>(corpus_tokens: I, k_max: usize) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let unique: BTreeSet<String> =
            corpus_tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        let mut id_to_token = vec![
            "[PAD]".to_string(),
            "[UNK]".to_string(),
            "[CLS]".to_string(),
            "[SEP]".to_string(),
            MASK_TOKEN.to_string(),
        ];
        for r in 1..=k_max {
            id_to_token.push(format!("[RANK_{r}]"));
        }
        let mut token_to_id = BTreeMap::new();
        for tok in unique {
            if token_to_id.contains_key(&tok) {
                continue;
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as u32);
            id_to_token.push(tok);
        }
        Vocabulary { k_max, token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Corpus token id, or UNK for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> u32 {
        if token == MASK_TOKEN {
            return MASK;
        }
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    /// Rank token for a 1-based retrieval rank; ranks past `k_max` clamp to
    /// the last rank token.
    pub fn rank_token(&self, rank: usize) -> u32 {
        let r = rank.clamp(1, self.k_max);
        FIRST_RANK + (r as u32 - 1)
    }

    pub fn first_corpus_id(&self) -> u32 {
        FIRST_RANK + self.k_max as u32
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Stable digest over the id layout; checkpoints store this to detect
    /// being loaded against a different vocabulary.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.k_max.to_le_bytes());
        for tok in &self.id_to_token {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
