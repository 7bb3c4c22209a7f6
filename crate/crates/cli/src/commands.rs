//! The pipeline commands. Each one checks its inputs, resolves the
//! content-addressed artifact name, skips the work when that exact artifact
//! already exists, and otherwise computes and writes it atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tether_core::checkpoint::{load_json, save_json, write_atomic};
use tether_core::corpus::{
    extract_features, load_kb, load_mentions, Document, Kb, Mention, MentionFeatures, StopwordList,
};
use tether_core::embedding::{load_embeddings, EmbeddingTable};
use tether_core::evaluation::{
    ablation_rows, dump_errors, evaluate_sets, render_ablation_text, render_ablation_tsv,
    render_report_text, retrieve_sets, run_ablation, to_json_bytes,
};
use tether_core::index::{Candidate, EntityIndex};
use tether_core::reranker::{
    build_training_examples, render, train_reranker, CandidateSet, FeatureConfig, RerankTrainConfig,
    RerankerBundle, RerankerModel,
};
use tether_core::retriever::{
    examples_from_corpus, train as train_encoder, DualEncoder, EncoderDims, RetrieverBundle,
    RetrieverTrainConfig,
};
use tether_core::synth::{synth_corpus, write_kb_jsonl, write_mentions_jsonl, SynthSpec};
use tether_core::vocab::{Vocabulary, MASK_TOKEN};
use tether_core::Error;

use crate::config::{seeds, PipelineConfig};
use crate::error::{require_artifact, require_input, CResult};
use crate::workspace::{Keys, Split, Workspace, CANDIDATES, CHECKPOINTS, INDEX, REPORTS};

type S = f64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestStats {
    pub entities: usize,
    pub vocab_tokens: usize,
    pub dim_embed: usize,
    pub train_mentions: usize,
    pub dev_mentions: usize,
    pub test_mentions: usize,
}

/// Everything downstream stages share: the token id space, the frozen word
/// vectors, and the KB's category inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestArtifact {
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingTable<S>,
    pub categories: Vec<String>,
    pub stats: IngestStats,
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn up_to_date(path: &Path) {
    println!("up-to-date {}", path.display());
}

fn require_corpus_inputs(cfg: &PipelineConfig) -> CResult<()> {
    require_input(&cfg.paths.kb, "knowledge base")?;
    require_input(&cfg.paths.mentions_train, "train mentions")?;
    require_input(&cfg.paths.mentions_dev, "dev mentions")?;
    require_input(&cfg.paths.mentions_test, "test mentions")?;
    if let Some(p) = &cfg.paths.embeddings {
        require_input(p, "embeddings file")?;
    }
    Ok(())
}

fn feature_map(
    documents: &BTreeMap<String, Document>,
    mentions: &[Mention],
    stopwords: &StopwordList,
) -> BTreeMap<String, MentionFeatures> {
    mentions
        .par_iter()
        .map(|m| {
            (m.mention_id.clone(), extract_features(m, &documents[&m.doc_id], mentions, stopwords))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

struct LoadedSplit {
    mentions: Vec<Mention>,
    features: BTreeMap<String, MentionFeatures>,
    gold: BTreeMap<String, Option<String>>,
}

fn load_split(cfg: &PipelineConfig, split: Split, kb: &Kb) -> CResult<LoadedSplit> {
    let path = split.mentions_path(cfg);
    let (documents, mentions) = load_mentions(&path, kb)?;
    let stopwords = StopwordList::default_list();
    let features = feature_map(&documents, &mentions, &stopwords);
    let gold = mentions.iter().map(|m| (m.mention_id.clone(), m.gold.clone())).collect();
    Ok(LoadedSplit { mentions, features, gold })
}

#[derive(Serialize)]
struct CandidatesLineOut<'a> {
    mention_id: &'a str,
    candidates: &'a [Candidate<S>],
}

#[derive(Deserialize)]
struct CandidatesLineIn {
    mention_id: String,
    candidates: Vec<Candidate<S>>,
}

fn write_candidates(path: &Path, sets: &[CandidateSet<S>]) -> CResult<()> {
    let mut out = Vec::new();
    for set in sets {
        let line = CandidatesLineOut { mention_id: &set.mention_id, candidates: &set.candidates };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

fn read_candidates(path: &Path, gold: &BTreeMap<String, Option<String>>) -> CResult<Vec<CandidateSet<S>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidatesLineIn = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let gold = gold.get(&rec.mention_id).cloned().ok_or_else(|| Error::InvalidMention {
            mention_id: rec.mention_id.clone(),
            msg: "listed in the candidates file but absent from the mentions file".into(),
        })?;
        sets.push(CandidateSet { mention_id: rec.mention_id, gold, candidates: rec.candidates });
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub entities: Option<usize>,
    pub confusable_pairs: Option<usize>,
    pub vocab_size: Option<usize>,
    pub mentions_per_entity: Option<usize>,
    pub hint_rate: Option<f64>,
    pub alias_rate: Option<f64>,
    pub alias_group: Option<usize>,
    pub secondary_mentions: Option<bool>,
}

pub fn cmd_synth(cfg: &PipelineConfig, params: &SynthParams) -> CResult<()> {
    let mut spec = SynthSpec::default();
    if let Some(v) = params.entities {
        spec.entities = v;
    }
    if let Some(v) = params.confusable_pairs {
        spec.confusable_pairs = v;
    }
    if let Some(v) = params.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = params.mentions_per_entity {
        spec.mentions_per_entity = v;
    }
    if let Some(v) = params.hint_rate {
        spec.hint_rate = v;
    }
    if let Some(v) = params.alias_rate {
        spec.alias_rate = v;
    }
    if let Some(v) = params.alias_group {
        spec.alias_group = v;
    }
    if let Some(v) = params.secondary_mentions {
        spec.secondary_mentions = v;
    }

    let corpus = synth_corpus(&spec, cfg.stage_seed(seeds::SYNTH))?;

    // Document-level split, 80/10/10 after a seeded shuffle.
    let mut doc_ids: Vec<&String> = corpus.documents.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(seeds::SPLIT));
    for i in (1..doc_ids.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        doc_ids.swap(i, j);
    }
    let n = doc_ids.len();
    let n_hold = n / 10;
    let split_of = |idx: usize| -> Split {
        if idx < n - 2 * n_hold {
            Split::Train
        } else if idx < n - n_hold {
            Split::Dev
        } else {
            Split::Test
        }
    };
    let assignment: BTreeMap<&str, Split> =
        doc_ids.iter().enumerate().map(|(i, id)| (id.as_str(), split_of(i))).collect();

    for p in [&cfg.paths.kb, &cfg.paths.mentions_train, &cfg.paths.mentions_dev, &cfg.paths.mentions_test] {
        if let Some(parent) = p.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
    }

    write_kb_jsonl(&corpus.kb, &cfg.paths.kb)?;
    wrote(&cfg.paths.kb);
    for split in [Split::Train, Split::Dev, Split::Test] {
        let documents: BTreeMap<String, Document> = corpus
            .documents
            .iter()
            .filter(|(id, _)| assignment[id.as_str()] == split)
            .map(|(id, d)| (id.clone(), d.clone()))
            .collect();
        let mentions: Vec<Mention> = corpus
            .mentions
            .iter()
            .filter(|m| assignment[m.doc_id.as_str()] == split)
            .cloned()
            .collect();
        let path = split.mentions_path(cfg);
        write_mentions_jsonl(&documents, &mentions, &path)?;
        println!(
            "split {}: {} docs, {} mentions",
            split.name(),
            documents.len(),
            mentions.len()
        );
        wrote(&path);
    }
    println!(
        "synth: {} entities ({} confusable), {} docs",
        corpus.kb.len(),
        corpus.pair_entity_ids.len(),
        corpus.documents.len()
    );
    Ok(())
}

/// Loads the ingest artifact, building and saving it first if this exact
/// corpus/config combination has not been ingested yet.
fn ensure_ingest(cfg: &PipelineConfig, ws: &Workspace) -> CResult<(String, IngestArtifact)> {
    require_corpus_inputs(cfg)?;
    let key = Keys::new(cfg).ingest()?;
    let path = ws.path(CHECKPOINTS, &format!("ingest-{key}.json"));
    if path.exists() {
        return Ok((key, load_json(&path, "ingest")?));
    }

    let kb = load_kb(&cfg.paths.kb)?;
    let mut tokens: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let mut categories: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for e in kb.values() {
        tokens.extend(e.title.iter().cloned());
        tokens.extend(e.description.iter().cloned());
        categories.extend(e.categories.iter().cloned());
    }
    let mut mention_counts = [0usize; 3];
    for (i, split) in [Split::Train, Split::Dev, Split::Test].into_iter().enumerate() {
        let (documents, mentions) = load_mentions(&split.mentions_path(cfg), &kb)?;
        mention_counts[i] = mentions.len();
        for d in documents.values() {
            for s in &d.sentences {
                tokens.extend(s.iter().cloned());
            }
        }
    }
    tokens.insert(MASK_TOKEN.to_string());

    let vocab = Vocabulary::build(tokens.iter(), cfg.k_max);
    let embeddings = match &cfg.paths.embeddings {
        Some(p) => {
            let table = load_embeddings::<S>(p)?;
            if table.dim() != cfg.dim_embed {
                return Err(Error::Config(format!(
                    "embeddings file {} has dimension {}, config says dim_embed = {}",
                    p.display(),
                    table.dim(),
                    cfg.dim_embed
                ))
                .into());
            }
            table
        }
        None => EmbeddingTable::random_init(tokens.iter(), cfg.dim_embed, cfg.stage_seed(seeds::EMBEDDINGS)),
    };

    let artifact = IngestArtifact {
        stats: IngestStats {
            entities: kb.len(),
            vocab_tokens: tokens.len(),
            dim_embed: embeddings.dim(),
            train_mentions: mention_counts[0],
            dev_mentions: mention_counts[1],
            test_mentions: mention_counts[2],
        },
        vocab,
        embeddings,
        categories: categories.into_iter().collect(),
    };
    save_json(&path, "ingest", &artifact)?;
    wrote(&path);
    Ok((key, artifact))
}

pub fn cmd_ingest(cfg: &PipelineConfig, ws: &Workspace) -> CResult<()> {
    let (key, artifact) = ensure_ingest(cfg, ws)?;
    let st = &artifact.stats;
    println!(
        "ingest {key}: {} entities, {} vocabulary tokens, dim {}, mentions train/dev/test {}/{}/{}",
        st.entities, st.vocab_tokens, st.dim_embed, st.train_mentions, st.dev_mentions, st.test_mentions
    );
    println!("up-to-date {}", ws.path(CHECKPOINTS, &format!("ingest-{key}.json")).display());
    Ok(())
}

fn retriever_path(ws: &Workspace, key: &str) -> PathBuf {
    ws.path(CHECKPOINTS, &format!("retriever-{key}.json"))
}

pub fn cmd_train_retriever(cfg: &PipelineConfig, ws: &Workspace) -> CResult<()> {
    let (ingest_key, artifact) = ensure_ingest(cfg, ws)?;
    let keys = Keys::new(cfg);
    let key = keys.retriever(&ingest_key);
    let path = retriever_path(ws, &key);
    if path.exists() {
        up_to_date(&path);
        return Ok(());
    }

    let kb = load_kb(&cfg.paths.kb)?;
    let (documents, mentions) = load_mentions(&cfg.paths.mentions_train, &kb)?;
    let stopwords = StopwordList::default_list();
    let examples = examples_from_corpus(&documents, &mentions, &stopwords);

    let dims = EncoderDims {
        dim_embed: artifact.embeddings.dim(),
        dim_cat: cfg.dim_cat,
        hidden: cfg.retriever.hidden,
        d_shared: cfg.retriever.d_shared,
    };
    let seed = cfg.stage_seed(seeds::RETRIEVER);
    let mut encoder = DualEncoder::<S>::new(dims, &artifact.categories, seed);
    let train_cfg = RetrieverTrainConfig { seed, ..cfg.retriever.clone() };
    let report = train_encoder(&mut encoder, &artifact.embeddings, &examples, &kb, &train_cfg)?;
    for round in &report.rounds {
        println!(
            "round {}: loss {:.4}, recall@1/10/100 {:.4}/{:.4}/{:.4}",
            round.label, round.mean_loss, round.recall1, round.recall10, round.recall100
        );
    }

    let bundle = RetrieverBundle { encoder, embeddings: artifact.embeddings, tau: cfg.retriever.tau };
    bundle.save(&path)?;
    wrote(&path);
    Ok(())
}

fn index_path(ws: &Workspace, key: &str) -> PathBuf {
    ws.path(INDEX, &format!("entities-{key}.json"))
}

/// Keys for the retriever and index stages, shared by every command past
/// train-retriever.
fn resolve_retrieval_keys(cfg: &PipelineConfig, ws: &Workspace) -> CResult<(String, String)> {
    let (ingest_key, _) = ensure_ingest(cfg, ws)?;
    let keys = Keys::new(cfg);
    let retriever_key = keys.retriever(&ingest_key);
    let index_key = keys.index(&retriever_key);
    Ok((retriever_key, index_key))
}

pub fn cmd_index(cfg: &PipelineConfig, ws: &Workspace) -> CResult<()> {
    let (retriever_key, index_key) = resolve_retrieval_keys(cfg, ws)?;
    let model_path = retriever_path(ws, &retriever_key);
    require_artifact(&model_path, "train-retriever")?;
    let path = index_path(ws, &index_key);
    if path.exists() {
        up_to_date(&path);
        return Ok(());
    }

    let bundle = RetrieverBundle::<S>::load(&model_path)?;
    let kb = load_kb(&cfg.paths.kb)?;
    let index = EntityIndex::build(&kb, &bundle.checksum(), |e| {
        bundle.encoder.encode_entity(&bundle.embeddings, e)
    });
    index.save(&path)?;
    println!("indexed {} entities at dimension {}", kb.len(), bundle.encoder.dims.d_shared);
    wrote(&path);
    Ok(())
}

fn candidates_path(ws: &Workspace, split: Split, key: &str) -> PathBuf {
    ws.path(CANDIDATES, &format!("{}-{key}.jsonl", split.name()))
}

pub fn cmd_retrieve(cfg: &PipelineConfig, ws: &Workspace, splits: &[Split]) -> CResult<()> {
    let (retriever_key, index_key) = resolve_retrieval_keys(cfg, ws)?;
    let keys = Keys::new(cfg);
    let model_path = retriever_path(ws, &retriever_key);
    require_artifact(&model_path, "train-retriever")?;
    let idx_path = index_path(ws, &index_key);
    require_artifact(&idx_path, "index")?;

    let bundle = RetrieverBundle::<S>::load(&model_path)?;
    let index = EntityIndex::<S>::load(&idx_path, Some(&bundle.checksum()), false)?;
    let kb = load_kb(&cfg.paths.kb)?;

    for &split in splits {
        let key = keys.candidates(&index_key, split)?;
        let path = candidates_path(ws, split, &key);
        if path.exists() {
            up_to_date(&path);
            continue;
        }
        let loaded = load_split(cfg, split, &kb)?;
        let sets = retrieve_sets(&bundle, &index, &loaded.features, &loaded.mentions, cfg.k)?;
        write_candidates(&path, &sets)?;
        println!("retrieved top-{} for {} {} mentions", cfg.k, sets.len(), split.name());
        wrote(&path);
    }
    Ok(())
}

fn reranker_train_cfg(cfg: &PipelineConfig) -> RerankTrainConfig {
    RerankTrainConfig { seed: cfg.stage_seed(seeds::RERANK_TRAIN), ..cfg.reranker.clone() }
}

/// Builds examples and trains one reranker for the given feature set. Shared
/// by cmd_train_reranker and the per-row training in cmd_ablate.
#[allow(clippy::too_many_arguments)]
fn train_one_reranker(
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
    sets: &[CandidateSet<S>],
    features: &BTreeMap<String, MentionFeatures>,
    kb: &Kb,
    feature_cfg: FeatureConfig,
    dump_inputs: Option<&Path>,
    path: &Path,
) -> CResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(seeds::NEGATIVES));
    let (examples, stats) = build_training_examples(
        sets,
        features,
        kb,
        vocab,
        feature_cfg,
        cfg.policy,
        cfg.transformer.max_seq_len,
        cfg.reranker.n_neg,
        &mut rng,
    )?;
    if let Some(dump) = dump_inputs {
        let mut text = String::new();
        for ex in &examples {
            text.push_str(&render(&ex.input, vocab));
            text.push('\n');
        }
        write_atomic(dump, text.as_bytes())?;
        println!("dumped {} input lines to {}", examples.len(), dump.display());
    }
    println!(
        "examples: {} mentions used, {} skipped (no gold {}, gold not retrieved {}), {} positive / {} negative pairs",
        stats.mentions_used,
        stats.skipped_no_gold + stats.skipped_gold_not_retrieved,
        stats.skipped_no_gold,
        stats.skipped_gold_not_retrieved,
        stats.positives,
        stats.negatives
    );
    if path.exists() {
        up_to_date(path);
        return Ok(());
    }

    let core_cfg = cfg.transformer.to_core(vocab.len(), cfg.stage_seed(seeds::TRANSFORMER));
    let mut model = RerankerModel::<S>::new(core_cfg)?;
    let report = train_reranker(&mut model, &examples, &reranker_train_cfg(cfg))?;
    println!(
        "trained reranker: {} steps, final loss {:.4}",
        report.steps, report.final_loss
    );

    let bundle = RerankerBundle {
        model,
        vocab: vocab.clone(),
        feature_config: feature_cfg,
        policy: cfg.policy,
    };
    bundle.save(path)?;
    wrote(path);
    Ok(())
}

fn reranker_artifact_path(ws: &Workspace, key: &str) -> PathBuf {
    ws.path(CHECKPOINTS, &format!("reranker-{key}.json"))
}

pub fn cmd_train_reranker(cfg: &PipelineConfig, ws: &Workspace, dump_inputs: Option<&Path>) -> CResult<()> {
    let (ingest_key, artifact) = ensure_ingest(cfg, ws)?;
    let keys = Keys::new(cfg);
    let retriever_key = keys.retriever(&ingest_key);
    let index_key = keys.index(&retriever_key);
    let cand_key = keys.candidates(&index_key, Split::Train)?;
    let cand_path = candidates_path(ws, Split::Train, &cand_key);
    require_artifact(&cand_path, "retrieve")?;

    let rr_key = keys.reranker(&cand_key, &cfg.features, None);
    let path = reranker_artifact_path(ws, &rr_key);
    if path.exists() && dump_inputs.is_none() {
        up_to_date(&path);
        return Ok(());
    }

    let kb = load_kb(&cfg.paths.kb)?;
    let loaded = load_split(cfg, Split::Train, &kb)?;
    let sets = read_candidates(&cand_path, &loaded.gold)?;
    train_one_reranker(cfg, &artifact.vocab, &sets, &loaded.features, &kb, cfg.features, dump_inputs, &path)
}

/// Candidates plus loaded mentions for one split, with the reranker key
/// already resolved. Shared by link, evaluate, and ablate.
struct EvalInputs {
    cand_key: String,
    sets: Vec<CandidateSet<S>>,
    loaded: LoadedSplit,
    kb: Kb,
    reranker_key: String,
}

fn resolve_eval_inputs(cfg: &PipelineConfig, ws: &Workspace, split: Split) -> CResult<EvalInputs> {
    let (ingest_key, _) = ensure_ingest(cfg, ws)?;
    let keys = Keys::new(cfg);
    let retriever_key = keys.retriever(&ingest_key);
    let index_key = keys.index(&retriever_key);
    let cand_key = keys.candidates(&index_key, split)?;
    let cand_path = candidates_path(ws, split, &cand_key);
    require_artifact(&cand_path, "retrieve")?;

    let train_cand_key = keys.candidates(&index_key, Split::Train)?;
    let reranker_key = keys.reranker(&train_cand_key, &cfg.features, None);

    let kb = load_kb(&cfg.paths.kb)?;
    let loaded = load_split(cfg, split, &kb)?;
    let sets = read_candidates(&cand_path, &loaded.gold)?;
    Ok(EvalInputs { cand_key, sets, loaded, kb, reranker_key })
}

#[derive(Serialize)]
struct LinkLine<'a> {
    mention_id: &'a str,
    predicted: Option<&'a str>,
    probability: Option<S>,
}

pub fn cmd_link(cfg: &PipelineConfig, ws: &Workspace, split: Split) -> CResult<()> {
    let inputs = resolve_eval_inputs(cfg, ws, split)?;
    let rr_path = reranker_artifact_path(ws, &inputs.reranker_key);
    require_artifact(&rr_path, "train-reranker")?;
    let bundle = RerankerBundle::<S>::load(&rr_path)?;

    let keys = Keys::new(cfg);
    let key = keys.link(&inputs.cand_key, &inputs.reranker_key, split);
    let path = ws.path(REPORTS, &format!("link-{}-{key}.jsonl", split.name()));
    if path.exists() {
        up_to_date(&path);
        return Ok(());
    }

    let predictions: Vec<(String, Option<String>, Option<S>)> = inputs
        .sets
        .par_iter()
        .map(|set| {
            if set.candidates.is_empty() {
                return Ok((set.mention_id.clone(), None, None));
            }
            let feats = inputs.loaded.features.get(&set.mention_id).ok_or_else(|| {
                Error::InvalidMention {
                    mention_id: set.mention_id.clone(),
                    msg: "no extracted features".into(),
                }
            })?;
            let pred = bundle.predict(feats, set, &inputs.kb)?;
            Ok((set.mention_id.clone(), Some(pred.entity_id), Some(pred.probability)))
        })
        .collect::<Result<_, Error>>()?;

    let mut out = Vec::new();
    for (mention_id, predicted, probability) in &predictions {
        let line = LinkLine { mention_id, predicted: predicted.as_deref(), probability: *probability };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(&path, &out)?;
    println!("linked {} mentions on {}", predictions.len(), split.name());
    wrote(&path);
    Ok(())
}

pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    ws: &Workspace,
    split: Split,
    retrieval_only: bool,
    dump_errors_to: Option<&Path>,
) -> CResult<()> {
    let inputs = resolve_eval_inputs(cfg, ws, split)?;
    let bundle = if retrieval_only {
        None
    } else {
        let rr_path = reranker_artifact_path(ws, &inputs.reranker_key);
        require_artifact(&rr_path, "train-reranker")?;
        Some(RerankerBundle::<S>::load(&rr_path)?)
    };

    let report = evaluate_sets(
        &inputs.sets,
        &inputs.loaded.features,
        &inputs.kb,
        bundle.as_ref(),
        split.name(),
    )?;

    let keys = Keys::new(cfg);
    let rr_key = bundle.as_ref().map(|_| inputs.reranker_key.as_str());
    let key = keys.report(&inputs.cand_key, rr_key, split);
    let path = ws.path(REPORTS, &format!("eval-{}-{key}.json", split.name()));
    if !path.exists() {
        let mut bytes = to_json_bytes(&report)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
    }

    print!("{}", render_report_text(&report));
    if let Some(dump) = dump_errors_to {
        let n = dump_errors(&report, &inputs.loaded.features, &inputs.kb, dump)?;
        println!("dumped {n} error records to {}", dump.display());
    }
    println!("report {}", path.display());
    Ok(())
}

pub fn cmd_ablate(cfg: &PipelineConfig, ws: &Workspace, split: Split) -> CResult<()> {
    let (ingest_key, artifact) = ensure_ingest(cfg, ws)?;
    let keys = Keys::new(cfg);
    let retriever_key = keys.retriever(&ingest_key);
    let index_key = keys.index(&retriever_key);

    let train_key = keys.candidates(&index_key, Split::Train)?;
    let train_path = candidates_path(ws, Split::Train, &train_key);
    require_artifact(&train_path, "retrieve")?;
    let eval_key = keys.candidates(&index_key, split)?;
    let eval_path = candidates_path(ws, split, &eval_key);
    require_artifact(&eval_path, "retrieve")?;

    let kb = load_kb(&cfg.paths.kb)?;
    let train = load_split(cfg, Split::Train, &kb)?;
    let train_sets = read_candidates(&train_path, &train.gold)?;
    let eval = load_split(cfg, split, &kb)?;
    let eval_sets = read_candidates(&eval_path, &eval.gold)?;

    let rows = ablation_rows();
    let mut models = BTreeMap::new();
    let mut row_keys = Vec::new();
    for (label, row_cfg) in &rows {
        let row_key = keys.reranker(&train_key, row_cfg, Some(label));
        let path = reranker_artifact_path(ws, &row_key);
        if !path.exists() {
            println!("training row {label}");
            train_one_reranker(cfg, &artifact.vocab, &train_sets, &train.features, &kb, *row_cfg, None, &path)?;
        }
        models.insert(label.clone(), RerankerBundle::<S>::load(&path)?);
        row_keys.push((label.clone(), row_key));
    }

    let grid = run_ablation(&models, &rows, &eval_sets, &eval.features, &kb, split.name())?;
    let key = keys.ablation(&row_keys, &eval_key, split);
    let json_path = ws.path(REPORTS, &format!("ablation-{}-{key}.json", split.name()));
    if !json_path.exists() {
        let mut bytes = to_json_bytes(&grid)?;
        bytes.push(b'\n');
        write_atomic(&json_path, &bytes)?;
    }
    let tsv_path = ws.path(REPORTS, &format!("ablation-{}-{key}.tsv", split.name()));
    if !tsv_path.exists() {
        write_atomic(&tsv_path, render_ablation_tsv(&grid).as_bytes())?;
    }

    print!("{}", render_ablation_text(&grid));
    println!("report {}", json_path.display());
    println!("report {}", tsv_path.display());
    Ok(())
}
