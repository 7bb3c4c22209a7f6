//! Deterministic synthetic corpus generator for desk-scale experiments.
//!
//! The generated world has three kinds of structure:
//! - singleton entities with unique one-token titles (a separable backbone);
//! - confusable pairs sharing a title, distinguished by a per-entity keyword
//!   that always appears in document context and, with probability
//!   `hint_rate`, also in the mention's local sentence;
//! - alias mentions: some singleton mentions use a group-shared alias span
//!   instead of the title, with the true name pushed into the context.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{Document, Entity, Kb, Mention};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct SynthSpec {
    pub entities: usize,
    pub confusable_pairs: usize,
    pub vocab_size: usize,
    pub mentions_per_entity: usize,
    /// Probability that a pair entity's keyword is copied into the local
    /// sentence (a weak signal the retriever can reach).
    pub hint_rate: f64,
    /// Probability that a singleton mention uses its alias-group span.
    pub alias_rate: f64,
    /// Singletons per alias group.
    pub alias_group: usize,
    /// Add one extra singleton mention per document.
    pub secondary_mentions: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            entities: 1000,
            confusable_pairs: 100,
            vocab_size: 2000,
            mentions_per_entity: 6,
            hint_rate: 0.25,
            alias_rate: 0.25,
            alias_group: 8,
            secondary_mentions: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.confusable_pairs * 2 > self.entities {
            return Err(Error::Config(format!(
                "confusable_pairs {} needs {} entities but only {} requested",
                self.confusable_pairs,
                self.confusable_pairs * 2,
                self.entities
            )));
        }
        if self.entities == 0 || self.vocab_size < 20 || self.mentions_per_entity == 0 {
            return Err(Error::Config("entities, vocab_size >= 20 and mentions_per_entity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hint_rate) || !(0.0..=1.0).contains(&self.alias_rate) {
            return Err(Error::Config("hint_rate and alias_rate must lie in [0, 1]".into()));
        }
        if self.alias_group == 0 {
            return Err(Error::Config("alias_group must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub kb: Kb,
    pub documents: BTreeMap<String, Document>,
    pub mentions: Vec<Mention>,
    /// Ids of the entities that belong to confusable pairs.
    pub pair_entity_ids: Vec<String>,
}

struct EntityPlan {
    entity: Entity,
    /// Discriminating keyword for pair members.
    keyword: Option<String>,
    /// Group alias span token for singletons.
    alias: Option<String>,
}

pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i:04}")).collect();
    let filler = |rng: &mut ChaCha8Rng| fillers[rng.gen_range(0..fillers.len())].clone();

    let n_singletons = spec.entities - 2 * spec.confusable_pairs;
    let mut plans: Vec<EntityPlan> = Vec::with_capacity(spec.entities);

    for p in 0..spec.confusable_pairs {
        let title = vec![format!("pair{p:04}")];
        for (side, cat) in [("a", "cat_pa"), ("b", "cat_pb")] {
            let keyword = format!("kw{p:04}{side}");
            let mut description = title.clone();
            description.push(keyword.clone());
            for _ in 0..3 {
                description.push(filler(&mut rng));
            }
            plans.push(EntityPlan {
                entity: Entity {
                    id: format!("e_p{p:04}{side}"),
                    title: title.clone(),
                    description,
                    categories: [format!("{cat}{}", p % 5)].into_iter().collect(),
                },
                keyword: Some(keyword),
                alias: None,
            });
        }
    }
    for s in 0..n_singletons {
        let name = format!("name{s:04}");
        let mut description = vec![name.clone(), "entry".to_string()];
        for _ in 0..3 {
            description.push(filler(&mut rng));
        }
        plans.push(EntityPlan {
            entity: Entity {
                id: format!("e_s{s:04}"),
                title: vec![name],
                description,
                categories: [format!("cat{}", s % 10)].into_iter().collect(),
            },
            keyword: None,
            alias: Some(format!("grp{:03}", s / spec.alias_group)),
        });
    }

    let singleton_ids: Vec<usize> =
        plans.iter().enumerate().filter(|(_, p)| p.keyword.is_none()).map(|(i, _)| i).collect();

    let mut kb = Kb::new();
    for p in &plans {
        kb.insert(p.entity.id.clone(), p.entity.clone());
    }

    let mut documents = BTreeMap::new();
    let mut mentions = Vec::new();
    for plan in &plans {
        for j in 0..spec.mentions_per_entity {
            let doc_id = format!("d_{}_{j}", plan.entity.id);

            // Local sentence: 3 fillers, span, 3 fillers.
            let mut span_tokens = plan.entity.title.clone();
            let mut right = vec![filler(&mut rng), filler(&mut rng), filler(&mut rng)];
            if let Some(alias) = &plan.alias {
                if spec.alias_rate > 0.0 && rng.gen_bool(spec.alias_rate) {
                    span_tokens = vec![alias.clone()];
                    right[0] = plan.entity.title[0].clone();
                }
            }
            if let Some(kw) = &plan.keyword {
                if spec.hint_rate > 0.0 && rng.gen_bool(spec.hint_rate) {
                    right[0] = kw.clone();
                }
            }
            let left = vec![filler(&mut rng), filler(&mut rng), filler(&mut rng)];
            let start = left.len();
            let end = start + span_tokens.len();
            let mut local: Vec<String> = left;
            local.extend(span_tokens);
            local.extend(right);

            // Context sentence carries the keyword for pair entities.
            let mut context: Vec<String> = (0..5).map(|_| filler(&mut rng)).collect();
            if let Some(kw) = &plan.keyword {
                let pos = rng.gen_range(0..=context.len().saturating_sub(1));
                context[pos] = kw.clone();
            }

            let mut sentences = vec![local, context];
            let mut doc_mentions = vec![(0usize, start, end, plan.entity.id.clone())];

            if spec.secondary_mentions && !singleton_ids.is_empty() {
                let other = &plans[singleton_ids[rng.gen_range(0..singleton_ids.len())]];
                let mut sec = vec![filler(&mut rng), filler(&mut rng)];
                let s_start = sec.len();
                sec.extend(other.entity.title.clone());
                let s_end = sec.len();
                sec.push(filler(&mut rng));
                sec.push(filler(&mut rng));
                sentences.push(sec);
                doc_mentions.push((2, s_start, s_end, other.entity.id.clone()));
            }

            documents.insert(doc_id.clone(), Document { doc_id: doc_id.clone(), sentences });
            for (k, (sent, s, e, gold)) in doc_mentions.into_iter().enumerate() {
                mentions.push(Mention {
                    mention_id: format!("{doc_id}#{k}"),
                    doc_id: doc_id.clone(),
                    sentence_index: sent,
                    start: s,
                    end: e,
                    gold: Some(gold),
                    out_of_kb: false,
                });
            }
        }
    }

    let pair_entity_ids = plans
        .iter()
        .filter(|p| p.keyword.is_some())
        .map(|p| p.entity.id.clone())
        .collect();

    Ok(SynthCorpus { kb, documents, mentions, pair_entity_ids })
}

#[derive(Serialize)]
struct KbLine<'a> {
    id: &'a str,
    title: String,
    description: String,
    categories: Vec<&'a str>,
}

#[derive(Serialize)]
struct MentionLine {
    sentence: usize,
    start: usize,
    end: usize,
    gold: Option<String>,
}

#[derive(Serialize)]
struct DocLine<'a> {
    doc_id: &'a str,
    sentences: Vec<String>,
    mentions: Vec<MentionLine>,
}

pub fn write_kb_jsonl(kb: &Kb, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in kb.values() {
        let line = KbLine {
            id: &e.id,
            title: e.title.join(" "),
            description: e.description.join(" "),
            categories: e.categories.iter().map(|c| c.as_str()).collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
    }
    crate::checkpoint::write_atomic(path, &out)
}

/// One line per document, carrying all of its mentions.
pub fn write_mentions_jsonl(
    documents: &BTreeMap<String, Document>,
    mentions: &[Mention],
    path: &Path,
) -> Result<()> {
    let mut by_doc: BTreeMap<&str, Vec<&Mention>> = BTreeMap::new();
    for m in mentions {
        by_doc.entry(&m.doc_id).or_default().push(m);
    }
    let mut out = Vec::new();
    for (doc_id, doc) in documents {
        let line = DocLine {
            doc_id,
            sentences: doc.sentences.iter().map(|s| s.join(" ")).collect(),
            mentions: by_doc
                .get(doc_id.as_str())
                .map(|ms| {
                    ms.iter()
                        .map(|m| MentionLine {
                            sentence: m.sentence_index,
                            start: m.start,
                            end: m.end,
                            gold: m.gold.clone(),
                        })
                        .collect()
                })
                .unwrap_or_default(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
    }
    crate::checkpoint::write_atomic(path, &out)
}
