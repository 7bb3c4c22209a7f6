// TEMPORARY tuning harness - not part of the suite; run with --ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tether_core::corpus::{extract_features, Mention, MentionFeatures, StopwordList};
use tether_core::embedding::EmbeddingTable;
use tether_core::evaluation::{evaluate_sets, retrieve_sets};
use tether_core::index::EntityIndex;
use tether_core::reranker::{
    build_training_examples, train_reranker, FeatureConfig, PositionalPolicy, RerankTrainConfig,
    RerankerBundle, RerankerModel, TransformerConfig,
};
use tether_core::retriever::{
    examples_from_corpus, train, DualEncoder, EncoderDims, RetrieverBundle, RetrieverTrainConfig,
};
use tether_core::synth::{synth_corpus, SynthCorpus, SynthSpec};
use tether_core::vocab::{Vocabulary, MASK_TOKEN};

type S = f64;

struct World {
    corpus: SynthCorpus,
    features: BTreeMap<String, MentionFeatures>,
    train_m: Vec<Mention>,
    eval_m: Vec<Mention>,
    vocab: Vocabulary,
    bundle: RetrieverBundle<S>,
}

fn build_world() -> World {
    let corpus = synth_corpus(&SynthSpec::default(), 11).unwrap();
    let stop = StopwordList::default_list();
    let features: BTreeMap<String, MentionFeatures> = corpus
        .mentions
        .iter()
        .map(|m| {
            (
                m.mention_id.clone(),
                extract_features(m, &corpus.documents[&m.doc_id], &corpus.mentions, &stop),
            )
        })
        .collect();

    let mut order: Vec<usize> = (0..corpus.mentions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let n_eval = corpus.mentions.len() * 15 / 100;
    let eval_m: Vec<Mention> = order[..n_eval].iter().map(|&i| corpus.mentions[i].clone()).collect();
    let train_m: Vec<Mention> = order[n_eval..].iter().map(|&i| corpus.mentions[i].clone()).collect();

    let mut tokens: BTreeSet<String> = BTreeSet::new();
    let mut categories: BTreeSet<String> = BTreeSet::new();
    for e in corpus.kb.values() {
        tokens.extend(e.title.iter().cloned());
        tokens.extend(e.description.iter().cloned());
        categories.extend(e.categories.iter().cloned());
    }
    for d in corpus.documents.values() {
        for s in &d.sentences {
            tokens.extend(s.iter().cloned());
        }
    }
    tokens.insert(MASK_TOKEN.to_string());
    let vocab = Vocabulary::build(tokens.iter(), 10);
    let categories: Vec<String> = categories.into_iter().collect();

    let cache = Path::new("/tmp/scratch-cache/retrieverB-v1.json");
    let bundle = if cache.exists() {
        RetrieverBundle::load(cache).unwrap()
    } else {
        let table = EmbeddingTable::<S>::random_init(tokens.iter(), 64, 2);
        let examples = examples_from_corpus(&corpus.documents, &train_m, &stop);
        let dims = EncoderDims { dim_embed: 64, dim_cat: 16, hidden: 128, d_shared: 64 };
        let mut enc = DualEncoder::<S>::new(dims, &categories, 3);
        let cfg = RetrieverTrainConfig {
            d_shared: 64,
            hidden: 128,
            lr: 0.02,
            batch_size: 32,
            in_batch_rounds: 1,
            hard_rounds: 2,
            k_neg: 5,
            tau: 0.1,
            epochs_per_round: 6,
            holdout_fraction: 0.1,
            seed: 3,
        };
        let t0 = Instant::now();
        let rep = train(&mut enc, &table, &examples, &corpus.kb, &cfg).unwrap();
        for r in &rep.rounds {
            println!(
                "round {}: loss {:.4} r1={:.4} r10={:.4}",
                r.label, r.mean_loss, r.recall1, r.recall10
            );
        }
        println!("retriever train {:?}", t0.elapsed());
        let b = RetrieverBundle { encoder: enc, embeddings: table, tau: 0.1 };
        std::fs::create_dir_all(cache.parent().unwrap()).unwrap();
        b.save(cache).unwrap();
        b
    };

    World { corpus, features, train_m, eval_m, vocab, bundle }
}

#[test]
#[ignore]
fn tune_reranker() {
    let w = build_world();
    let kb = &w.corpus.kb;
    let index = EntityIndex::build(kb, &w.bundle.checksum(), |e| {
        w.bundle.encoder.encode_entity(&w.bundle.embeddings, e)
    });
    let eval_sets = retrieve_sets(&w.bundle, &index, &w.features, &w.eval_m, 10).unwrap();
    let base = evaluate_sets(&eval_sets, &w.features, kb, None::<&RerankerBundle<S>>, "eval").unwrap();
    println!("retrieval: r1={:.4} r10={:.4} oracle={:.4}", base.recall_at_1, base.recall_at_10, base.oracle_accuracy);

    let pair_ids: BTreeSet<&str> = w.corpus.pair_entity_ids.iter().map(|s| s.as_str()).collect();
    let is_pair = |m: &Mention| m.gold.as_deref().map_or(false, |g| pair_ids.contains(g));

    // Pair-heavy subsample: every pair mention plus a slice of the rest, so
    // each keyword type shows up ~5x instead of ~1x.
    let mut tm: Vec<Mention> = w.train_m.iter().filter(|m| is_pair(m)).cloned().collect();
    let mut rest: Vec<Mention> = w.train_m.iter().filter(|m| !is_pair(m)).cloned().collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    rest.truncate(1000);
    tm.extend(rest);
    tm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    println!("train mentions: {} ({} pair)", tm.len(), tm.iter().filter(|m| is_pair(m)).count());
    let train_sets = retrieve_sets(&w.bundle, &index, &w.features, &tm, 5).unwrap();

    let pair_eval: Vec<&Mention> = w.eval_m.iter().filter(|m| is_pair(m)).collect();
    let base_pair = pair_eval
        .iter()
        .filter(|m| {
            eval_sets
                .iter()
                .find(|s| s.mention_id == m.mention_id)
                .map_or(false, |s| s.candidates[0].entity_id == *m.gold.as_ref().unwrap())
        })
        .count();
    println!("eval pair mentions: {} base-r1 {}", pair_eval.len(), base_pair);

    for (tag, heads, dropout, lr, epochs) in [
        ("h2-lr.05-e8", 2usize, 0.0f64, 0.05f64, 8usize),
        ("h2-lr.10-e8", 2, 0.0, 0.10, 8),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (examples, stats) = build_training_examples(
            &train_sets,
            &w.features,
            kb,
            &w.vocab,
            FeatureConfig::default(),
            PositionalPolicy::Full,
            96,
            None,
            &mut rng,
        )
        .unwrap();
        println!("{tag}: {} pos / {} neg", stats.positives, stats.negatives);
        let tc = TransformerConfig {
            layers: 2,
            heads,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 96,
            vocab_size: w.vocab.len(),
            dropout,
            seed: 4,
        };
        let mut model = RerankerModel::<S>::new(tc).unwrap();
        let rc = RerankTrainConfig { lr, batch_size: 16, epochs, warmup_frac: 0.1, n_neg: None, seed: 5 };
        let t0 = Instant::now();
        let rep = train_reranker(&mut model, &examples, &rc).unwrap();
        let tt = t0.elapsed();
        let rb = RerankerBundle {
            model,
            vocab: w.vocab.clone(),
            feature_config: FeatureConfig::default(),
            policy: PositionalPolicy::Full,
        };
        let er = evaluate_sets(&eval_sets, &w.features, kb, Some(&rb), "eval").unwrap();
        let mut pair_hit = 0usize;
        for m in &pair_eval {
            let set = eval_sets.iter().find(|s| s.mention_id == m.mention_id).unwrap();
            let p = rb.predict(&w.features[&m.mention_id], set, kb).unwrap();
            if &p.entity_id == m.gold.as_ref().unwrap() {
                pair_hit += 1;
            }
        }
        println!(
            "{tag}: acc={:.4} vs r1={:.4} r10={:.4}  pair {}/{} (base {})  loss={:.4} train={:?} eval-done",
            er.accuracy, er.recall_at_1, er.recall_at_10, pair_hit, pair_eval.len(), base_pair, rep.final_loss, tt
        );
    }
}
