//! Mention-level metrics, the feature-ablation runner, and report emission.
//!
//! Every evaluation run re-checks the metric identities: recall@n must be
//! monotone, an identity reranker (always rank 1) must score exactly
//! recall@1, a perfect oracle must score exactly recall@k, and the reranked
//! accuracy can never beat the oracle. A violation panics; it means the
//! metric code itself is wrong, not the data.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::corpus::{Kb, Mention, MentionFeatures};
use crate::error::{Error, Result};
use crate::index::{recall_at, EntityIndex};
use crate::reranker::{CandidateSet, FeatureConfig, RerankerBundle};
use crate::retriever::RetrieverBundle;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord<S> {
    pub mention_id: String,
    pub gold: Option<String>,
    /// 1-based retrieval rank of the gold, when it was retrieved at all.
    pub gold_rank: Option<usize>,
    pub predicted: Option<String>,
    /// Reranker probability of the prediction; absent in retrieval-only runs.
    pub probability: Option<S>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<S> {
    pub dataset: String,
    pub mentions: usize,
    pub out_of_kb: usize,
    /// Retrieval depth the candidate lists were built with.
    pub k_used: usize,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub recall_at_100: f64,
    /// What always answering with the rank-1 candidate scores; equal to
    /// recall@1 by definition.
    pub identity_accuracy: f64,
    /// What answering with the gold whenever it was retrieved scores; equal
    /// to recall@k_used by definition, and an upper bound on `accuracy`.
    pub oracle_accuracy: f64,
    pub accuracy: f64,
    pub reranked: bool,
    pub records: Vec<MentionRecord<S>>,
}

/// Encodes each mention and pulls its top-k candidates from the index.
pub fn retrieve_sets<S: Scalar>(
    retriever: &RetrieverBundle<S>,
    index: &EntityIndex<S>,
    features: &BTreeMap<String, MentionFeatures>,
    mentions: &[Mention],
    k: usize,
) -> Result<Vec<CandidateSet<S>>> {
    mentions
        .par_iter()
        .map(|m| {
            let f = features.get(&m.mention_id).ok_or_else(|| Error::InvalidMention {
                mention_id: m.mention_id.clone(),
                msg: "no extracted features".into(),
            })?;
            let query = retriever.encoder.encode_mention(&retriever.embeddings, f);
            Ok(CandidateSet {
                mention_id: m.mention_id.clone(),
                gold: m.gold.clone(),
                candidates: index.search(&query, k),
            })
        })
        .collect()
}

/// Scores precomputed candidate sets, reranking them when a model is given;
/// without one the rank-1 candidate is the answer. Out-of-KB golds (and
/// mentions with no gold) count as misses everywhere.
pub fn evaluate_sets<S: Scalar>(
    sets: &[CandidateSet<S>],
    features: &BTreeMap<String, MentionFeatures>,
    kb: &Kb,
    reranker: Option<&RerankerBundle<S>>,
    dataset: &str,
) -> Result<EvalReport<S>> {
    let records: Vec<MentionRecord<S>> = sets
        .par_iter()
        .map(|set| {
            let gold_rank = set.gold.as_ref().and_then(|g| {
                set.candidates.iter().find(|c| &c.entity_id == g).map(|c| c.rank)
            });
            let (predicted, probability) = match (reranker, set.candidates.is_empty()) {
                (_, true) => (None, None),
                (None, false) => {
                    let first = set.candidates.iter().find(|c| c.rank == 1);
                    (first.map(|c| c.entity_id.clone()), None)
                }
                (Some(rr), false) => {
                    let f = features.get(&set.mention_id).ok_or_else(|| Error::InvalidMention {
                        mention_id: set.mention_id.clone(),
                        msg: "no extracted features".into(),
                    })?;
                    let pred = rr.predict(f, set, kb)?;
                    (Some(pred.entity_id), Some(pred.probability))
                }
            };
            let correct = set.gold.is_some() && set.gold == predicted;
            Ok(MentionRecord {
                mention_id: set.mention_id.clone(),
                gold: set.gold.clone(),
                gold_rank,
                predicted,
                probability,
                correct,
            })
        })
        .collect::<Result<_>>()?;

    let n = sets.len();
    let k_used = sets.iter().map(|s| s.candidates.len()).max().unwrap_or(0);
    let out_of_kb =
        sets.iter().filter(|s| s.gold.as_ref().map_or(true, |g| !kb.contains_key(g))).count();
    let hits_at = |k: usize| -> usize {
        sets.iter()
            .filter(|s| s.gold.as_ref().is_some_and(|g| recall_at(&s.candidates, g, k)))
            .count()
    };
    let r1 = hits_at(1);
    let r10 = hits_at(10);
    let r100 = hits_at(100);
    let rk = hits_at(k_used);
    let identity =
        records.iter().filter(|r| r.gold.is_some() && r.gold_rank == Some(1)).count();
    let oracle = records.iter().filter(|r| r.gold.is_some() && r.gold_rank.is_some()).count();
    let correct = records.iter().filter(|r| r.correct).count();

    assert!(r1 <= r10 && r10 <= r100, "recall must be monotone in n ({r1}/{r10}/{r100})");
    assert_eq!(identity, r1, "an identity reranker must score exactly recall@1");
    assert_eq!(oracle, rk, "an oracle reranker must score exactly recall@{k_used}");
    assert!(correct <= rk, "accuracy {correct}/{n} cannot beat recall@{k_used} = {rk}/{n}");

    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(EvalReport {
        dataset: dataset.to_string(),
        mentions: n,
        out_of_kb,
        k_used,
        recall_at_1: frac(r1),
        recall_at_10: frac(r10),
        recall_at_100: frac(r100),
        identity_accuracy: frac(identity),
        oracle_accuracy: frac(oracle),
        accuracy: frac(correct),
        reranked: reranker.is_some(),
        records,
    })
}

/// Retrieval plus scoring in one call.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<S: Scalar>(
    retriever: &RetrieverBundle<S>,
    index: &EntityIndex<S>,
    reranker: Option<&RerankerBundle<S>>,
    features: &BTreeMap<String, MentionFeatures>,
    mentions: &[Mention],
    kb: &Kb,
    k: usize,
    dataset: &str,
) -> Result<EvalReport<S>> {
    let sets = retrieve_sets(retriever, index, features, mentions, k)?;
    evaluate_sets(&sets, features, kb, reranker, dataset)
}

/// The ablation rows in their canonical order, labeled by feature-symbol set.
pub fn ablation_rows() -> Vec<(String, FeatureConfig)> {
    let base = FeatureConfig {
        use_span: true,
        use_local_ctx: false,
        use_doc_mentions: false,
        use_doc_bow: false,
        use_entity_name: true,
        use_entity_desc: false,
        use_rank_token: true,
    };
    vec![
        ("{m_s,e_n}".to_string(), base),
        ("{m_s,c_l,e_n}".to_string(), FeatureConfig { use_local_ctx: true, ..base }),
        (
            "{m_s,c_l,e_d}".to_string(),
            FeatureConfig {
                use_local_ctx: true,
                use_entity_name: false,
                use_entity_desc: true,
                ..base
            },
        ),
        (
            "{m_s,c_l,c_dm,e_d}".to_string(),
            FeatureConfig {
                use_local_ctx: true,
                use_doc_mentions: true,
                use_entity_name: false,
                use_entity_desc: true,
                ..base
            },
        ),
        (
            "{m_s,c_l,c_dm,c_db,e_d}".to_string(),
            FeatureConfig {
                use_local_ctx: true,
                use_doc_mentions: true,
                use_doc_bow: true,
                use_entity_name: false,
                use_entity_desc: true,
                ..base
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow<S> {
    pub label: String,
    /// Absent when no model was supplied for this row.
    pub report: Option<EvalReport<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid<S> {
    pub rows: Vec<AblationRow<S>>,
}

/// Evaluates one trained reranker per row. Rows without a model are kept in
/// the table, marked absent, so partial grids still line up.
pub fn run_ablation<S: Scalar>(
    models: &BTreeMap<String, RerankerBundle<S>>,
    rows: &[(String, FeatureConfig)],
    sets: &[CandidateSet<S>],
    features: &BTreeMap<String, MentionFeatures>,
    kb: &Kb,
    dataset: &str,
) -> Result<AblationGrid<S>> {
    let mut labels = std::collections::BTreeSet::new();
    for (label, _) in rows {
        if !labels.insert(label) {
            return Err(Error::Config(format!("duplicate ablation row label {label}")));
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    for (label, cfg) in rows {
        let report = match models.get(label) {
            Some(bundle) => {
                if bundle.feature_config != *cfg {
                    return Err(Error::Config(format!(
                        "model for row {label} was trained with a different feature config"
                    )));
                }
                Some(evaluate_sets(sets, features, kb, Some(bundle), dataset)?)
            }
            None => {
                log::warn!("ablation row {label}: no model supplied, marking absent");
                None
            }
        };
        out.push(AblationRow { label: label.clone(), report });
    }
    Ok(AblationGrid { rows: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRef {
    pub id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub mention_id: String,
    /// Local sentence with the span bracketed inline.
    pub sentence: String,
    pub doc_bow: Vec<String>,
    pub predicted: Option<EntityRef>,
    pub gold: Option<EntityRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDumpHeader {
    pub dataset: String,
    pub mentions: usize,
    pub errors: usize,
}

fn entity_ref(id: &str, kb: &Kb) -> EntityRef {
    EntityRef {
        id: id.to_string(),
        description: kb.get(id).map(|e| e.description.join(" ")).unwrap_or_default(),
    }
}

fn marked_sentence(f: &MentionFeatures) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(f.local_sentence.len() + 2);
    for (i, tok) in f.local_sentence.iter().enumerate() {
        if i == f.span_start {
            parts.push("[");
        }
        if i == f.span_end {
            parts.push("]");
        }
        parts.push(tok);
    }
    if f.span_end == f.local_sentence.len() {
        parts.push("]");
    }
    parts.join(" ")
}

/// Writes every miss as one JSON line (after a header line): the marked
/// sentence, the document bag of words, and the predicted vs gold entities
/// with their descriptions. Returns the number of error records written.
pub fn dump_errors<S: Scalar>(
    report: &EvalReport<S>,
    features: &BTreeMap<String, MentionFeatures>,
    kb: &Kb,
    path: &Path,
) -> Result<usize> {
    let mut lines = Vec::new();
    let errors: Vec<&MentionRecord<S>> = report.records.iter().filter(|r| !r.correct).collect();
    let header = ErrorDumpHeader {
        dataset: report.dataset.clone(),
        mentions: report.mentions,
        errors: errors.len(),
    };
    lines.push(serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?);
    for r in &errors {
        let f = features.get(&r.mention_id).ok_or_else(|| Error::InvalidMention {
            mention_id: r.mention_id.clone(),
            msg: "no extracted features".into(),
        })?;
        let rec = ErrorRecord {
            mention_id: r.mention_id.clone(),
            sentence: marked_sentence(f),
            doc_bow: f.doc_bow.clone(),
            predicted: r.predicted.as_deref().map(|id| entity_ref(id, kb)),
            gold: r.gold.as_deref().map(|id| entity_ref(id, kb)),
        };
        lines.push(serde_json::to_string(&rec).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    let mut text = lines.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(errors.len())
}

fn fmt_metric(x: f64) -> String {
    format!("{x:.4}")
}

/// Key-value summary block, aligned for terminals.
pub fn render_report_text<S: Scalar>(report: &EvalReport<S>) -> String {
    let mode = if report.reranked { "reranked" } else { "retrieval-only" };
    let rows = [
        ("dataset".to_string(), report.dataset.clone()),
        ("mentions".to_string(), report.mentions.to_string()),
        ("out of KB".to_string(), report.out_of_kb.to_string()),
        ("k".to_string(), report.k_used.to_string()),
        ("recall@1".to_string(), fmt_metric(report.recall_at_1)),
        ("recall@10".to_string(), fmt_metric(report.recall_at_10)),
        ("recall@100".to_string(), fmt_metric(report.recall_at_100)),
        ("oracle".to_string(), fmt_metric(report.oracle_accuracy)),
        (format!("accuracy ({mode})"), fmt_metric(report.accuracy)),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:width$}  {v}\n")).collect()
}

/// One line per row: label, accuracy, recalls. Absent rows print dashes.
pub fn render_ablation_tsv<S: Scalar>(grid: &AblationGrid<S>) -> String {
    let mut out = String::from("row\taccuracy\trecall@1\trecall@10\tmentions\n");
    for row in &grid.rows {
        match &row.report {
            Some(r) => {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    row.label,
                    fmt_metric(r.accuracy),
                    fmt_metric(r.recall_at_1),
                    fmt_metric(r.recall_at_10),
                    r.mentions
                ));
            }
            None => out.push_str(&format!("{}\t-\t-\t-\t-\n", row.label)),
        }
    }
    out
}

/// The TSV grid with elastic column widths, for terminals.
pub fn render_ablation_text<S: Scalar>(grid: &AblationGrid<S>) -> String {
    let tsv = render_ablation_tsv(grid);
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.len())).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> =
            row.iter().enumerate().map(|(c, s)| format!("{s:<width$}", width = widths[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Serializes a report (or any artifact) as canonical JSON bytes.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Mean probability the reranker assigned to its predictions, a cheap
/// confidence signal for report summaries.
pub fn mean_probability<S: Scalar>(report: &EvalReport<S>) -> Option<f64> {
    let ps: Vec<f64> =
        report.records.iter().filter_map(|r| r.probability.and_then(|p| p.to_f64())).collect();
    if ps.is_empty() {
        None
    } else {
        Some(ps.iter().sum::<f64>() / ps.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Entity;
    use crate::index::Candidate;
    use crate::reranker::{PositionalPolicy, RerankerModel, TransformerConfig};
    use crate::retriever::{DualEncoder, EncoderDims};
    use crate::vocab::Vocabulary;
    use crate::embedding::EmbeddingTable;
    use std::collections::BTreeSet;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn entity(id: &str, title: &[&str], desc: &[&str]) -> Entity {
        Entity {
            id: id.to_string(),
            title: toks(title),
            description: toks(desc),
            categories: BTreeSet::new(),
        }
    }

    fn sample_kb() -> Kb {
        let mut kb = Kb::new();
        for e in [
            entity("g1", &["felis"], &["felis", "is", "a", "genus"]),
            entity("g2", &["dog"], &["a", "red", "dog"]),
            entity("g3", &["fox"], &["the", "red", "fox"]),
            entity("d1", &["alpha"], &["alpha", "beta"]),
            entity("d2", &["beta"], &["beta", "gamma"]),
        ] {
            kb.insert(e.id.clone(), e);
        }
        kb
    }

    fn mention_features() -> MentionFeatures {
        MentionFeatures {
            span_tokens: toks(&["big", "cat"]),
            left_context: toks(&["the"]),
            right_context: toks(&["sat", "here"]),
            masked_sentence: toks(&["the", "[MASK]", "sat", "here"]),
            local_sentence: toks(&["the", "big", "cat", "sat", "here"]),
            span_start: 1,
            span_end: 3,
            doc_bow: toks(&["alpha", "beta", "gamma"]),
            doc_mentions: vec![toks(&["dog"])],
        }
    }

    fn feature_map(ids: &[&str]) -> BTreeMap<String, MentionFeatures> {
        ids.iter().map(|id| (id.to_string(), mention_features())).collect()
    }

    fn cands<S: Scalar>(ids: &[&str]) -> Vec<Candidate<S>> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| Candidate {
                entity_id: id.to_string(),
                score: S::from_f64(1.0 - 0.1 * i as f64).unwrap(),
                rank: i + 1,
            })
            .collect()
    }

    fn set<S: Scalar>(id: &str, gold: Option<&str>, candidates: &[&str]) -> CandidateSet<S> {
        CandidateSet {
            mention_id: id.to_string(),
            gold: gold.map(str::to_string),
            candidates: cands(candidates),
        }
    }

    /// m1 hits at rank 1, m2 at rank 3, m3's gold was never retrieved, m4's
    /// gold is not in the KB at all, m5 has no gold.
    fn sample_sets() -> Vec<CandidateSet<f64>> {
        vec![
            set("m1", Some("g1"), &["g1", "d1", "d2"]),
            set("m2", Some("g2"), &["d1", "d2", "g2"]),
            set("m3", Some("g3"), &["d1", "d2", "g1"]),
            set("m4", Some("ghost"), &["d1", "d2", "g1"]),
            set("m5", None, &["d1", "d2", "g1"]),
        ]
    }

    fn sample_ids() -> Vec<&'static str> {
        vec!["m1", "m2", "m3", "m4", "m5"]
    }

    #[test]
    fn retrieval_only_metrics_match_a_hand_count() {
        let sets = sample_sets();
        let report =
            evaluate_sets(&sets, &feature_map(&sample_ids()), &sample_kb(), None, "dev").unwrap();

        assert_eq!(report.mentions, 5);
        assert_eq!(report.out_of_kb, 2);
        assert_eq!(report.k_used, 3);
        assert_eq!(report.recall_at_1, 0.2);
        assert_eq!(report.recall_at_10, 0.4);
        assert_eq!(report.recall_at_100, 0.4);
        assert_eq!(report.identity_accuracy, 0.2);
        assert_eq!(report.oracle_accuracy, 0.4);
        assert_eq!(report.accuracy, 0.2);
        assert!(!report.reranked);

        let by_id: BTreeMap<&str, &MentionRecord<f64>> =
            report.records.iter().map(|r| (r.mention_id.as_str(), r)).collect();
        assert_eq!(by_id["m1"].gold_rank, Some(1));
        assert!(by_id["m1"].correct);
        assert_eq!(by_id["m2"].gold_rank, Some(3));
        assert_eq!(by_id["m2"].predicted.as_deref(), Some("d1"));
        assert!(!by_id["m2"].correct);
        assert_eq!(by_id["m3"].gold_rank, None);
        assert_eq!(by_id["m4"].gold_rank, None);
        assert_eq!(by_id["m5"].gold, None);
        assert!(!by_id["m5"].correct, "a mention with no gold can never be correct");
        assert!(report.records.iter().all(|r| r.probability.is_none()));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let sets = sample_sets();
        let features = feature_map(&sample_ids());
        let kb = sample_kb();
        let a = evaluate_sets(&sets, &features, &kb, None, "dev").unwrap();
        let b = evaluate_sets(&sets, &features, &kb, None, "dev").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_order_follows_input_order() {
        let sets = sample_sets();
        let report =
            evaluate_sets(&sets, &feature_map(&sample_ids()), &sample_kb(), None, "dev").unwrap();
        let got: Vec<&str> = report.records.iter().map(|r| r.mention_id.as_str()).collect();
        assert_eq!(got, sample_ids());
    }

    fn tiny_bundle(features: FeatureConfig) -> RerankerBundle<f64> {
        let vocab = Vocabulary::build(
            [
                "the", "big", "cat", "sat", "here", "alpha", "beta", "gamma", "dog", "red", "fox",
                "felis", "is", "a", "genus",
            ],
            10,
        );
        let cfg = TransformerConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 64,
            vocab_size: vocab.len(),
            dropout: 0.0,
            seed: 3,
        };
        RerankerBundle {
            model: RerankerModel::new(cfg).unwrap(),
            vocab,
            feature_config: features,
            policy: PositionalPolicy::default(),
        }
    }

    #[test]
    fn reranked_runs_attach_probabilities_and_respect_the_oracle_bound() {
        let sets = sample_sets();
        let features = feature_map(&sample_ids());
        let kb = sample_kb();
        let bundle = tiny_bundle(FeatureConfig::default());
        let report = evaluate_sets(&sets, &features, &kb, Some(&bundle), "dev").unwrap();

        assert!(report.reranked);
        assert!(report.records.iter().all(|r| r.probability.is_some()));
        assert!(report.accuracy <= report.oracle_accuracy);
        assert!(mean_probability(&report).is_some());

        let again = evaluate_sets(&sets, &features, &kb, Some(&bundle), "dev").unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn missing_features_surface_the_offending_mention() {
        let sets = sample_sets();
        let mut features = feature_map(&sample_ids());
        features.remove("m2");
        let bundle = tiny_bundle(FeatureConfig::default());
        let err = evaluate_sets(&sets, &features, &sample_kb(), Some(&bundle), "dev").unwrap_err();
        assert!(err.to_string().contains("m2"), "got: {err}");
    }

    #[test]
    fn empty_runs_report_zeroes() {
        let sets: Vec<CandidateSet<f64>> = Vec::new();
        let report = evaluate_sets(&sets, &BTreeMap::new(), &sample_kb(), None, "dev").unwrap();
        assert_eq!(report.mentions, 0);
        assert_eq!(report.accuracy, 0.0);
        assert_eq!(report.k_used, 0);
    }

    #[test]
    fn ablation_rows_are_labeled_by_their_feature_set() {
        let rows = ablation_rows();
        let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(
            labels,
            [
                "{m_s,e_n}",
                "{m_s,c_l,e_n}",
                "{m_s,c_l,e_d}",
                "{m_s,c_l,c_dm,e_d}",
                "{m_s,c_l,c_dm,c_db,e_d}",
            ]
        );
        for (label, cfg) in &rows {
            cfg.validate().unwrap();
            assert_eq!(label.contains("c_l"), cfg.use_local_ctx, "{label}");
            assert_eq!(label.contains("c_dm"), cfg.use_doc_mentions, "{label}");
            assert_eq!(label.contains("c_db"), cfg.use_doc_bow, "{label}");
            assert_eq!(label.contains("e_n"), cfg.use_entity_name, "{label}");
            assert_eq!(label.contains("e_d"), cfg.use_entity_desc, "{label}");
            assert!(cfg.use_span, "{label}");
        }
    }

    #[test]
    fn ablation_marks_missing_models_absent_and_keeps_going() {
        let sets = sample_sets();
        let features = feature_map(&sample_ids());
        let kb = sample_kb();
        let rows = ablation_rows();
        let mut models = BTreeMap::new();
        models.insert(rows[0].0.clone(), tiny_bundle(rows[0].1));
        models.insert(rows[2].0.clone(), tiny_bundle(rows[2].1));

        let grid = run_ablation(&models, &rows, &sets, &features, &kb, "dev").unwrap();
        assert_eq!(grid.rows.len(), 5);
        let present: Vec<bool> = grid.rows.iter().map(|r| r.report.is_some()).collect();
        assert_eq!(present, [true, false, true, false, false]);
        for (row, (label, _)) in grid.rows.iter().zip(&rows) {
            assert_eq!(&row.label, label);
        }
    }

    #[test]
    fn ablation_rejects_a_model_trained_with_the_wrong_features() {
        let sets = sample_sets();
        let features = feature_map(&sample_ids());
        let kb = sample_kb();
        let rows = ablation_rows();
        let mut models = BTreeMap::new();
        models.insert(rows[0].0.clone(), tiny_bundle(rows[3].1));
        let err = run_ablation(&models, &rows, &sets, &features, &kb, "dev").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn error_dump_round_trips_and_counts_every_miss() {
        let sets = sample_sets();
        let features = feature_map(&sample_ids());
        let kb = sample_kb();
        let report = evaluate_sets(&sets, &features, &kb, None, "dev").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("errors.jsonl");
        let n = dump_errors(&report, &features, &kb, &path).unwrap();
        assert_eq!(n, 4);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header: ErrorDumpHeader = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header, ErrorDumpHeader { dataset: "dev".into(), mentions: 5, errors: 4 });
        let records: Vec<ErrorRecord> =
            lines.map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 4);

        let by_id: BTreeMap<&str, &ErrorRecord> =
            records.iter().map(|r| (r.mention_id.as_str(), r)).collect();
        assert_eq!(by_id["m2"].sentence, "the [ big cat ] sat here");
        assert_eq!(by_id["m2"].doc_bow, toks(&["alpha", "beta", "gamma"]));
        assert_eq!(by_id["m2"].predicted.as_ref().unwrap().id, "d1");
        assert_eq!(by_id["m2"].predicted.as_ref().unwrap().description, "alpha beta");
        assert_eq!(by_id["m2"].gold.as_ref().unwrap().description, "a red dog");
        let ghost = by_id["m4"].gold.as_ref().unwrap();
        assert_eq!(ghost.id, "ghost");
        assert_eq!(ghost.description, "", "an out-of-KB gold has no description to show");
        assert!(by_id["m5"].gold.is_none());
    }

    #[test]
    fn a_clean_run_dumps_only_the_header() {
        let sets = vec![set::<f64>("m1", Some("g1"), &["g1", "d1"])];
        let features = feature_map(&["m1"]);
        let kb = sample_kb();
        let report = evaluate_sets(&sets, &features, &kb, None, "dev").unwrap();
        assert_eq!(report.accuracy, 1.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("errors.jsonl");
        let n = dump_errors(&report, &features, &kb, &path).unwrap();
        assert_eq!(n, 0);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header: ErrorDumpHeader = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header.errors, 0);
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn span_at_the_sentence_edge_still_gets_closed_brackets() {
        let mut f = mention_features();
        f.span_start = 3;
        f.span_end = 5;
        assert_eq!(marked_sentence(&f), "the big cat [ sat here ]");
        f.span_start = 0;
        f.span_end = 1;
        assert_eq!(marked_sentence(&f), "[ the ] big cat sat here");
    }

    #[test]
    fn report_text_lists_every_headline_metric() {
        let sets = sample_sets();
        let report =
            evaluate_sets(&sets, &feature_map(&sample_ids()), &sample_kb(), None, "dev").unwrap();
        let text = render_report_text(&report);
        for needle in
            ["dataset", "dev", "recall@1", "recall@10", "recall@100", "0.2000", "0.4000", "oracle"]
        {
            assert!(text.contains(needle), "missing {needle} in:\n{text}");
        }
    }

    #[test]
    fn ablation_tsv_prints_dashes_for_absent_rows() {
        let sets = sample_sets();
        let features = feature_map(&sample_ids());
        let kb = sample_kb();
        let rows = ablation_rows();
        let mut models = BTreeMap::new();
        models.insert(rows[0].0.clone(), tiny_bundle(rows[0].1));
        let grid = run_ablation(&models, &rows, &sets, &features, &kb, "dev").unwrap();

        let tsv = render_ablation_tsv(&grid);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("row\taccuracy"));
        assert!(lines[1].starts_with("{m_s,e_n}\t0."));
        assert!(lines[2].contains("\t-\t-"));
        let text = render_ablation_text(&grid);
        assert!(text.contains("{m_s,c_l,c_dm,c_db,e_d}"));
        assert!(!text.contains('\t'));
    }

    #[test]
    fn retrieval_assigns_dense_ranks_in_score_order() {
        let kb = sample_kb();
        let vocab_tokens = [
            "the", "big", "cat", "sat", "here", "alpha", "beta", "gamma", "dog", "red", "fox",
            "felis", "is", "a", "genus", "[MASK]",
        ];
        let dims = EncoderDims { dim_embed: 6, dim_cat: 5, hidden: 10, d_shared: 8 };
        let encoder = DualEncoder::<f64>::new(dims, Vec::<String>::new(), 11);
        let embeddings = EmbeddingTable::random_init(vocab_tokens, 6, 12);
        let bundle = RetrieverBundle { encoder, embeddings, tau: 0.05 };
        let index = EntityIndex::build(&kb, &bundle.checksum(), |e| {
            bundle.encoder.encode_entity(&bundle.embeddings, e)
        });

        let mentions: Vec<Mention> = ["m1", "m2"]
            .iter()
            .map(|id| Mention {
                mention_id: id.to_string(),
                doc_id: "doc0".into(),
                sentence_index: 0,
                start: 1,
                end: 3,
                gold: Some("g1".into()),
                out_of_kb: false,
            })
            .collect();
        let features = feature_map(&["m1", "m2"]);
        let sets = retrieve_sets(&bundle, &index, &features, &mentions, 3).unwrap();

        assert_eq!(sets.len(), 2);
        for s in &sets {
            assert_eq!(s.gold.as_deref(), Some("g1"));
            assert_eq!(s.candidates.len(), 3);
            for (i, c) in s.candidates.iter().enumerate() {
                assert_eq!(c.rank, i + 1);
                if i > 0 {
                    assert!(c.score <= s.candidates[i - 1].score);
                }
            }
        }
        assert_eq!(sets[0].candidates, sets[1].candidates, "identical features, identical lists");

        let report = evaluate_sets(&sets, &features, &kb, None, "dev").unwrap();
        assert_eq!(report.mentions, 2);
        assert_eq!(report.k_used, 3);

        let missing = retrieve_sets(&bundle, &index, &BTreeMap::new(), &mentions, 3).unwrap_err();
        assert!(missing.to_string().contains("m1"));
    }
}
