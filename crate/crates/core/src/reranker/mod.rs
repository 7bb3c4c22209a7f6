//! The reranker: builds (mention, candidate) token sequences, trains the
//! cross-attention classifier on retrieved candidates, and picks the final
//! entity by argmax probability.

pub mod transformer;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, Kb, MentionFeatures};
use crate::error::{Error, Result};
use crate::index::Candidate;
use crate::math::Params;
use crate::scalar::{cast, Scalar};
use crate::vocab::{Vocabulary, CLS, SEP};

pub use transformer::{bce_with_logit, sigmoid, RerankerModel, TransformerConfig};

/// Which mention-side and entity-side features go into the input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub use_span: bool,
    pub use_local_ctx: bool,
    pub use_doc_mentions: bool,
    pub use_doc_bow: bool,
    pub use_entity_name: bool,
    pub use_entity_desc: bool,
    pub use_rank_token: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            use_span: true,
            use_local_ctx: true,
            use_doc_mentions: true,
            use_doc_bow: true,
            use_entity_name: true,
            use_entity_desc: true,
            use_rank_token: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_span || self.use_local_ctx) {
            return Err(Error::Config("at least one mention feature must be enabled".into()));
        }
        if !(self.use_entity_name || self.use_entity_desc) {
            return Err(Error::Config("at least one entity feature must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Mention,
    DocMentions,
    DocBow,
    Rank,
    Entity,
}

/// Where positional embeddings apply. `NoBow` drops them on the bag-of-words
/// block, whose order carries no information; `NoSegment` is the diagnostic
/// generalization to any block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionalPolicy {
    Full,
    NoBow,
    NoSegment(Block),
}

impl Default for PositionalPolicy {
    fn default() -> Self {
        PositionalPolicy::Full
    }
}

/// Half-open content ranges of each block in the final token sequence,
/// excluding the [SEP] that closes it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpans {
    pub mention: (usize, usize),
    pub doc_mentions: Option<(usize, usize)>,
    pub doc_bow: Option<(usize, usize)>,
    pub rank: Option<usize>,
    pub entity: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankInput {
    pub tokens: Vec<u32>,
    /// 0 on the mention side, 1 from the rank token onward.
    pub segments: Vec<u8>,
    /// Whether the positional embedding is added at each slot.
    pub positional: Vec<bool>,
    pub spans: BlockSpans,
}

/// Assembles one classifier input:
/// [CLS] mention [SEP] (doc_mentions [SEP])? (doc_bow [SEP])? RANK_r [SEP] entity [SEP].
///
/// With local context the mention is demarcated inline: the sentence with
/// [SEP] immediately before and after the span. The entity side is the
/// description when enabled (the name is omitted; descriptions almost always
/// repeat it), else the title. Over-length input loses the description tail
/// first, then the bag-of-words tail, then the doc-mentions tail; the mention
/// block, rank token, and entity title are never cut.
pub fn build_input(
    features: &MentionFeatures,
    candidate: &Entity,
    rank: usize,
    vocab: &Vocabulary,
    cfg: FeatureConfig,
    policy: PositionalPolicy,
    max_len: usize,
) -> Result<RerankInput> {
    cfg.validate()?;
    if rank == 0 || rank > vocab.k_max() {
        return Err(Error::RerankInput(format!("rank {rank} outside 1..={}", vocab.k_max())));
    }
    let ids = |toks: &[String]| -> Vec<u32> { toks.iter().map(|t| vocab.id(t)).collect() };

    let mention: Vec<u32> = if cfg.use_local_ctx {
        let s = &features.local_sentence;
        let (a, b) = (features.span_start, features.span_end);
        if a > b || b > s.len() {
            return Err(Error::RerankInput(format!(
                "span [{a}, {b}) outside local sentence of {} tokens",
                s.len()
            )));
        }
        if cfg.use_span {
            let mut m = ids(&s[..a]);
            m.push(SEP);
            m.extend(ids(&s[a..b]));
            m.push(SEP);
            m.extend(ids(&s[b..]));
            m
        } else {
            ids(s)
        }
    } else {
        ids(&features.span_tokens)
    };

    let docm: Option<Vec<u32>> = if cfg.use_doc_mentions {
        let flat: Vec<u32> =
            features.doc_mentions.iter().flat_map(|m| m.iter()).map(|t| vocab.id(t)).collect();
        (!flat.is_empty()).then_some(flat)
    } else {
        None
    };
    let bow: Option<Vec<u32>> = if cfg.use_doc_bow {
        let b = ids(&features.doc_bow);
        (!b.is_empty()).then_some(b)
    } else {
        None
    };
    // Fall back to the title when a wanted description is missing; an empty
    // entity side would leave nothing to classify against.
    let entity_is_desc = cfg.use_entity_desc && !candidate.description.is_empty();
    let entity: Vec<u32> =
        if entity_is_desc { ids(&candidate.description) } else { ids(&candidate.title) };

    let rank_slots = if cfg.use_rank_token { 2 } else { 0 };
    let mut keep_entity = entity.len();
    let mut keep_bow = bow.as_ref().map(Vec::len);
    let mut keep_docm = docm.as_ref().map(Vec::len);
    let total = |ke: usize, kb: Option<usize>, kd: Option<usize>| {
        1 + mention.len()
            + 1
            + kd.map_or(0, |n| n + 1)
            + kb.map_or(0, |n| n + 1)
            + rank_slots
            + ke
            + 1
    };
    let mut over = total(keep_entity, keep_bow, keep_docm).saturating_sub(max_len);
    if over > 0 && entity_is_desc {
        let cut = over.min(keep_entity);
        keep_entity -= cut;
        over -= cut;
    }
    if over > 0 {
        if let Some(kb) = keep_bow.as_mut() {
            let cut = over.min(*kb);
            *kb -= cut;
            over -= cut;
        }
    }
    if over > 0 {
        if let Some(kd) = keep_docm.as_mut() {
            let cut = over.min(*kd);
            *kd -= cut;
            over -= cut;
        }
    }
    if over > 0 {
        return Err(Error::RerankInput(format!(
            "input needs {} tokens after truncation, over the limit of {max_len}",
            total(keep_entity, keep_bow, keep_docm)
        )));
    }

    let mut tokens = Vec::with_capacity(total(keep_entity, keep_bow, keep_docm));
    tokens.push(CLS);
    let m_start = tokens.len();
    tokens.extend_from_slice(&mention);
    let m_end = tokens.len();
    tokens.push(SEP);
    let docm_span = keep_docm.map(|kd| {
        let s = tokens.len();
        tokens.extend_from_slice(&docm.as_ref().expect("docm present")[..kd]);
        tokens.push(SEP);
        (s, s + kd)
    });
    let bow_span = keep_bow.map(|kb| {
        let s = tokens.len();
        tokens.extend_from_slice(&bow.as_ref().expect("bow present")[..kb]);
        tokens.push(SEP);
        (s, s + kb)
    });
    let rank_pos = cfg.use_rank_token.then(|| {
        let p = tokens.len();
        tokens.push(vocab.rank_token(rank));
        tokens.push(SEP);
        p
    });
    let e_start = tokens.len();
    tokens.extend_from_slice(&entity[..keep_entity]);
    let e_end = tokens.len();
    tokens.push(SEP);
    debug_assert!(tokens.len() <= max_len);

    let seg_boundary = rank_pos.unwrap_or(e_start);
    let segments: Vec<u8> = (0..tokens.len()).map(|i| u8::from(i >= seg_boundary)).collect();
    let spans = BlockSpans {
        mention: (m_start, m_end),
        doc_mentions: docm_span,
        doc_bow: bow_span,
        rank: rank_pos,
        entity: (e_start, e_end),
    };
    let mut positional = vec![true; tokens.len()];
    let masked = match policy {
        PositionalPolicy::Full => None,
        PositionalPolicy::NoBow | PositionalPolicy::NoSegment(Block::DocBow) => spans.doc_bow,
        PositionalPolicy::NoSegment(Block::Mention) => Some(spans.mention),
        PositionalPolicy::NoSegment(Block::DocMentions) => spans.doc_mentions,
        PositionalPolicy::NoSegment(Block::Rank) => spans.rank.map(|p| (p, p + 1)),
        PositionalPolicy::NoSegment(Block::Entity) => Some(spans.entity),
    };
    if let Some((s, e)) = masked {
        for p in &mut positional[s..e] {
            *p = false;
        }
    }
    Ok(RerankInput { tokens, segments, positional, spans })
}

/// The exact token sequence as text, for input dumps.
pub fn render(input: &RerankInput, vocab: &Vocabulary) -> String {
    input.tokens.iter().map(|&t| vocab.token(t)).collect::<Vec<_>>().join(" ")
}

/// Retrieval output for one mention, as consumed by the reranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet<S> {
    pub mention_id: String,
    #[serde(default)]
    pub gold: Option<String>,
    pub candidates: Vec<Candidate<S>>,
}

#[derive(Debug, Clone)]
pub struct RerankExample<S> {
    pub input: RerankInput,
    pub label: S,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub mentions_used: usize,
    pub skipped_no_gold: usize,
    pub skipped_gold_not_retrieved: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Builds labeled training pairs: the gold candidate as a positive, non-gold
/// candidates as negatives (all of them, or a uniform sample of `n_neg` when
/// capped). Mentions without a gold, or whose gold was not retrieved, are
/// skipped; there is nothing consistent to teach from them.
#[allow(clippy::too_many_arguments)]
pub fn build_training_examples<S: Scalar>(
    sets: &[CandidateSet<S>],
    features: &BTreeMap<String, MentionFeatures>,
    kb: &Kb,
    vocab: &Vocabulary,
    cfg: FeatureConfig,
    policy: PositionalPolicy,
    max_len: usize,
    n_neg: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<RerankExample<S>>, PairStats)> {
    let mut out = Vec::new();
    let mut stats = PairStats::default();
    for set in sets {
        let Some(gold) = set.gold.as_deref() else {
            stats.skipped_no_gold += 1;
            continue;
        };
        let Some(gold_cand) = set.candidates.iter().find(|c| c.entity_id == gold) else {
            stats.skipped_gold_not_retrieved += 1;
            continue;
        };
        let feats = features.get(&set.mention_id).ok_or_else(|| {
            Error::RerankInput(format!("no features for mention {}", set.mention_id))
        })?;
        let lookup = |id: &str| {
            kb.get(id)
                .ok_or_else(|| Error::RerankInput(format!("candidate {id} missing from the KB")))
        };
        out.push(RerankExample {
            input: build_input(feats, lookup(gold)?, gold_cand.rank, vocab, cfg, policy, max_len)?,
            label: S::one(),
        });
        stats.positives += 1;
        let mut negs: Vec<&Candidate<S>> =
            set.candidates.iter().filter(|c| c.entity_id != gold).collect();
        if let Some(cap) = n_neg {
            if negs.len() > cap {
                negs.shuffle(rng);
                negs.truncate(cap);
                negs.sort_by_key(|c| c.rank);
            }
        }
        for c in negs {
            out.push(RerankExample {
                input: build_input(feats, lookup(&c.entity_id)?, c.rank, vocab, cfg, policy, max_len)?,
                label: S::zero(),
            });
            stats.negatives += 1;
        }
        stats.mentions_used += 1;
    }
    if stats.skipped_no_gold > 0 || stats.skipped_gold_not_retrieved > 0 {
        log::info!(
            "reranker pairs: skipped {} mentions with no gold, {} whose gold was not retrieved",
            stats.skipped_no_gold,
            stats.skipped_gold_not_retrieved
        );
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of total steps spent linearly warming the rate up from zero.
    pub warmup_frac: f64,
    /// Cap on negatives per mention; `None` keeps every retrieved non-gold.
    pub n_neg: Option<usize>,
    pub seed: u64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        RerankTrainConfig {
            lr: 0.05,
            batch_size: 8,
            epochs: 30,
            warmup_frac: 0.1,
            n_neg: Some(20),
            seed: 0,
        }
    }
}

impl RerankTrainConfig {
    /// Fine-tuning settings from the source experiments (full scale).
    pub fn paper() -> Self {
        RerankTrainConfig {
            lr: 6e-6,
            batch_size: 64,
            epochs: 3,
            warmup_frac: 0.1,
            n_neg: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("reranker lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("reranker batch size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} outside [0, 1]", self.warmup_frac)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTrainReport<S> {
    pub epoch_losses: Vec<S>,
    pub final_loss: S,
    pub steps: usize,
}

/// Minimizes binary cross-entropy by mini-batch gradient descent with linear
/// warmup. Single-threaded and fully determined by the seed.
pub fn train_reranker<S: Scalar>(
    model: &mut RerankerModel<S>,
    examples: &[RerankExample<S>],
    cfg: &RerankTrainConfig,
) -> Result<RerankTrainReport<S>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no reranker training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let warmup_steps = (total_steps as f64 * cfg.warmup_frac).ceil() as usize;
    let use_dropout = model.cfg.dropout > 0.0;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = S::zero();
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = model.zeroed();
            let inv = S::one() / cast::<S>(chunk.len() as f64);
            let mut batch_loss = S::zero();
            for &i in chunk {
                let ex = &examples[i];
                let (logit, cache) = model.run(&ex.input, use_dropout.then_some(&mut rng))?;
                let loss = bce_with_logit(logit, ex.label);
                if !loss.is_finite() {
                    return Err(Error::Divergence { round: format!("epoch {epoch}"), step });
                }
                batch_loss += loss * inv;
                let d = (sigmoid(logit) - ex.label) * inv;
                model.backward(&ex.input, &cache, d, &mut grads);
            }
            let lr = if step < warmup_steps {
                cfg.lr * (step + 1) as f64 / warmup_steps as f64
            } else {
                cfg.lr
            };
            model.add_scaled_params(&grads, cast::<S>(-lr));
            epoch_loss += batch_loss;
            step += 1;
        }
        epoch_losses.push(epoch_loss / cast::<S>(batches_per_epoch as f64));
    }
    let final_loss = *epoch_losses.last().expect("at least one epoch");
    Ok(RerankTrainReport { epoch_losses, final_loss, steps: step })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate<S> {
    pub entity_id: String,
    pub probability: S,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<S> {
    pub entity_id: String,
    pub probability: S,
    pub scores: Vec<ScoredCandidate<S>>,
}

/// Scores every candidate and returns the argmax; exact probability ties go
/// to the better (smaller) retrieval rank.
pub fn predict<S: Scalar>(
    model: &RerankerModel<S>,
    features: &MentionFeatures,
    set: &CandidateSet<S>,
    kb: &Kb,
    vocab: &Vocabulary,
    cfg: FeatureConfig,
    policy: PositionalPolicy,
) -> Result<Prediction<S>> {
    if set.candidates.is_empty() {
        return Err(Error::RerankInput(format!("mention {}: empty candidate set", set.mention_id)));
    }
    let max_len = model.cfg.max_seq_len;
    let mut scores = Vec::with_capacity(set.candidates.len());
    let mut best: Option<(S, usize, usize)> = None;
    for c in &set.candidates {
        let entity = kb
            .get(&c.entity_id)
            .ok_or_else(|| Error::RerankInput(format!("candidate {} missing from the KB", c.entity_id)))?;
        let input = build_input(features, entity, c.rank, vocab, cfg, policy, max_len)?;
        let p = model.forward(&input)?;
        let better = match best {
            None => true,
            Some((bp, br, _)) => p > bp || (p == bp && c.rank < br),
        };
        if better {
            best = Some((p, c.rank, scores.len()));
        }
        scores.push(ScoredCandidate { entity_id: c.entity_id.clone(), probability: p, rank: c.rank });
    }
    let (probability, _, idx) = best.expect("non-empty candidates");
    Ok(Prediction { entity_id: scores[idx].entity_id.clone(), probability, scores })
}

/// Everything needed to rerank: the model plus the vocabulary and input
/// recipe it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerBundle<S> {
    pub model: RerankerModel<S>,
    pub vocab: Vocabulary,
    pub feature_config: FeatureConfig,
    pub policy: PositionalPolicy,
}

impl<S: Scalar> RerankerBundle<S> {
    pub fn checksum(&self) -> String {
        crate::checkpoint::digest_of(self)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_json(path, "reranker", self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::checkpoint::load_json(path, "reranker")
    }

    pub fn predict(&self, features: &MentionFeatures, set: &CandidateSet<S>, kb: &Kb) -> Result<Prediction<S>> {
        predict(&self.model, features, set, kb, &self.vocab, self.feature_config, self.policy)
    }
}
