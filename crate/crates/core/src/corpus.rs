//! Data model and ingestion: knowledge bases, documents, mentions, and the
//! feature extraction that feeds both the retriever and the reranker.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::MASK_TOKEN;

pub type Kb = BTreeMap<String, Entity>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub title: Vec<String>,
    pub description: Vec<String>,
    pub categories: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub mention_id: String,
    pub doc_id: String,
    pub sentence_index: usize,
    /// Half-open token interval [start, end) within the sentence.
    pub start: usize,
    pub end: usize,
    pub gold: Option<String>,
    /// True when the gold id is absent from the KB (or there is no gold).
    /// Such mentions are scored as automatic misses.
    pub out_of_kb: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionFeatures {
    pub span_tokens: Vec<String>,
    pub left_context: Vec<String>,
    pub right_context: Vec<String>,
    pub masked_sentence: Vec<String>,
    pub local_sentence: Vec<String>,
    /// Span position as token indices into `local_sentence`.
    pub span_start: usize,
    pub span_end: usize,
    /// Deduplicated non-stopword document tokens outside the local sentence,
    /// in lexicographic order.
    pub doc_bow: Vec<String>,
    /// Surface token sequences of the other mentions in the same document.
    pub doc_mentions: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct StopwordList {
    words: BTreeSet<String>,
}

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

impl StopwordList {
    /// The built-in ~150-word English list.
    pub fn default_list() -> Self {
        Self::from_text(DEFAULT_STOPWORDS)
    }

    /// One token per line. Lines are passed through the tokenizer so the
    /// stored set is closed under its normalization.
    pub fn from_text(text: &str) -> Self {
        let mut words = BTreeSet::new();
        for line in text.lines() {
            for tok in tokenize(line) {
                words.insert(tok);
            }
        }
        StopwordList { words }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|s| s.as_str())
    }
}

/// Lowercases, then splits into maximal alphanumeric runs; every other
/// non-whitespace character becomes a single-character token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut run = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            run.push(ch);
        } else {
            if !run.is_empty() {
                tokens.push(std::mem::take(&mut run));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !run.is_empty() {
        tokens.push(run);
    }
    tokens
}

/// Maps a character-offset span (Unicode scalar offsets, half-open) over raw
/// sentence text to the minimal token span covering every overlapped token.
/// Returns None when the range overlaps no token.
pub fn char_span_to_token_span(text: &str, char_start: usize, char_end: usize) -> Option<(usize, usize)> {
    let mut tok_start = None;
    let mut tok_end = None;
    let mut tok_idx = 0usize;
    let mut in_run = false;
    let mut run_begin = 0usize;
    let mark = |tb: usize, te: usize, idx: usize, tok_start: &mut Option<usize>, tok_end: &mut Option<usize>| {
        if tb < char_end && te > char_start {
            tok_start.get_or_insert(idx);
            *tok_end = Some(idx + 1);
        }
    };
    for (i, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            if !in_run {
                in_run = true;
                run_begin = i;
            }
        } else {
            if in_run {
                mark(run_begin, i, tok_idx, &mut tok_start, &mut tok_end);
                tok_idx += 1;
                in_run = false;
            }
            if !ch.is_whitespace() {
                mark(i, i + 1, tok_idx, &mut tok_start, &mut tok_end);
                tok_idx += 1;
            }
        }
    }
    if in_run {
        let n = text.chars().count();
        mark(run_begin, n, tok_idx, &mut tok_start, &mut tok_end);
    }
    match (tok_start, tok_end) {
        (Some(s), Some(e)) => Some((s, e)),
        _ => None,
    }
}

#[derive(Deserialize)]
struct KbRecord {
    id: String,
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    categories: Vec<String>,
}

/// Loads a KB from JSONL (`id`, `title`, `description`, `categories` per
/// line). Title and description strings are tokenized; category ids are kept
/// verbatim.
pub fn load_kb(path: &Path) -> Result<Kb> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kb = Kb::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KbRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let title = tokenize(&rec.title);
        if title.is_empty() {
            return Err(Error::InvalidEntity {
                id: rec.id,
                msg: "title tokenizes to nothing".into(),
            });
        }
        let entity = Entity {
            id: rec.id.clone(),
            title,
            description: tokenize(&rec.description),
            categories: rec.categories.into_iter().collect(),
        };
        if kb.insert(rec.id.clone(), entity).is_some() {
            return Err(Error::DuplicateEntity { path: path.display().to_string(), line: lineno, id: rec.id });
        }
    }
    if kb.is_empty() {
        log::warn!("{}: empty knowledge base", path.display());
    }
    log::info!("{}: loaded {} entities", path.display(), kb.len());
    Ok(kb)
}

#[derive(Deserialize)]
struct MentionRecord {
    sentence: usize,
    start: usize,
    end: usize,
    #[serde(default)]
    gold: Option<String>,
}

#[derive(Deserialize)]
struct DocRecord {
    doc_id: String,
    #[serde(default)]
    sentences: Vec<String>,
    #[serde(default)]
    mentions: Vec<MentionRecord>,
}

/// Loads documents and mentions from JSONL. The first line naming a doc_id
/// defines its sentences; later lines may only add mentions. Sentence strings
/// are tokenized; spans are token offsets. Golds missing from the KB are kept
/// and flagged out-of-KB.
pub fn load_mentions(path: &Path, kb: &Kb) -> Result<(BTreeMap<String, Document>, Vec<Mention>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs: BTreeMap<String, Document> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut mentions = Vec::new();
    let mut out_of_kb = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if !docs.contains_key(&rec.doc_id) {
            let sentences: Vec<Vec<String>> = rec.sentences.iter().map(|s| tokenize(s)).collect();
            if sentences.is_empty() {
                return Err(Error::parse(path, lineno, format!("doc {} has no sentences", rec.doc_id)));
            }
            if let Some(j) = sentences.iter().position(|s| s.is_empty()) {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("doc {} sentence {j} tokenizes to nothing", rec.doc_id),
                ));
            }
            docs.insert(rec.doc_id.clone(), Document { doc_id: rec.doc_id.clone(), sentences });
        } else if !rec.sentences.is_empty() {
            log::warn!("{}:{lineno}: doc {} redefined; keeping first body", path.display(), rec.doc_id);
        }
        let doc = &docs[&rec.doc_id];
        let count = counts.entry(rec.doc_id.clone()).or_insert(0);
        for m in rec.mentions {
            let mention_id = format!("{}#{}", rec.doc_id, *count);
            *count += 1;
            let sentence = doc.sentences.get(m.sentence).ok_or_else(|| Error::InvalidMention {
                mention_id: mention_id.clone(),
                msg: format!("sentence index {} out of range", m.sentence),
            })?;
            if m.start >= m.end || m.end > sentence.len() {
                return Err(Error::InvalidMention {
                    mention_id,
                    msg: format!("span [{}, {}) invalid for sentence of length {}", m.start, m.end, sentence.len()),
                });
            }
            let flagged = match &m.gold {
                Some(g) => !kb.contains_key(g),
                None => true,
            };
            if flagged {
                out_of_kb += 1;
            }
            mentions.push(Mention {
                mention_id,
                doc_id: rec.doc_id.clone(),
                sentence_index: m.sentence,
                start: m.start,
                end: m.end,
                gold: m.gold,
                out_of_kb: flagged,
            });
        }
    }
    log::info!(
        "{}: loaded {} docs, {} mentions ({out_of_kb} out-of-KB)",
        path.display(),
        docs.len(),
        mentions.len()
    );
    Ok((docs, mentions))
}

const CONTEXT_WINDOW: usize = 5;

/// Extracts the full feature bundle for one mention. Pure: identical inputs
/// give identical outputs.
pub fn extract_features(
    mention: &Mention,
    document: &Document,
    all_mentions: &[Mention],
    stopwords: &StopwordList,
) -> MentionFeatures {
    let sentence = &document.sentences[mention.sentence_index];
    let span_tokens = sentence[mention.start..mention.end].to_vec();
    let left_from = mention.start.saturating_sub(CONTEXT_WINDOW);
    let left_context = sentence[left_from..mention.start].to_vec();
    let right_to = (mention.end + CONTEXT_WINDOW).min(sentence.len());
    let right_context = sentence[mention.end..right_to].to_vec();

    let mut masked_sentence = Vec::with_capacity(sentence.len() - (mention.end - mention.start) + 1);
    masked_sentence.extend_from_slice(&sentence[..mention.start]);
    masked_sentence.push(MASK_TOKEN.to_string());
    masked_sentence.extend_from_slice(&sentence[mention.end..]);

    let local_set: BTreeSet<&str> = sentence.iter().map(|s| s.as_str()).collect();
    let mut doc_bow = BTreeSet::new();
    for (i, s) in document.sentences.iter().enumerate() {
        if i == mention.sentence_index {
            continue;
        }
        for tok in s {
            if !local_set.contains(tok.as_str()) && !stopwords.contains(tok) {
                doc_bow.insert(tok.clone());
            }
        }
    }

    let doc_mentions = all_mentions
        .iter()
        .filter(|m| m.doc_id == mention.doc_id && m.mention_id != mention.mention_id)
        .map(|m| document.sentences[m.sentence_index][m.start..m.end].to_vec())
        .collect();

    MentionFeatures {
        span_tokens,
        left_context,
        right_context,
        masked_sentence,
        local_sentence: sentence.clone(),
        span_start: mention.start,
        span_end: mention.end,
        doc_bow: doc_bow.into_iter().collect(),
        doc_mentions,
    }
}
