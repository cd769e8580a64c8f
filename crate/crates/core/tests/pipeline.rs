//! Cross-module behavior: corpus -> training -> decoding -> metrics.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use streamtt::corpus::{self, GenConfig, PairSpec, Split};
use streamtt::decoder::{greedy_stream_decode, DecodeConfig};
use streamtt::mask::ChunkMaskSpec;
use streamtt::model::{FeatureSequence, ModelConfig, TransducerModel};
use streamtt::tensor::Tensor;
use streamtt::trainer::{self, TrainConfig};

fn small_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        hidden_dim: 24,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 48,
        predictor_layers: 1,
        predictor_dim: 16,
        joint_dim: 16,
        chunk: ChunkMaskSpec {
            chunk_size: 3,
            left_chunks: 1,
            num_layers: 2,
        },
        layer_norm_eps: 1e-5,
    }
}

fn small_corpus(dir: &std::path::Path, seed: u64) -> corpus::CorpusManifest {
    let suite = corpus::make_suite(2, 1, 10, 8, seed).unwrap();
    let pairs = vec![PairSpec::new("A", "M"), PairSpec::new("B", "M")];
    let cfg = GenConfig {
        train_per_pair: 20,
        test_per_pair: 8,
        min_len: 3,
        max_len: 5,
        noise_sigma: 0.05,
        seed,
    };
    corpus::generate_corpus(&suite, &pairs, &cfg, dir).unwrap()
}

#[test]
fn untrained_model_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), 5);
    let model = {
        let mut m = TransducerModel::new(small_config(), 6).unwrap();
        m.add_branch("M", 10, 7).unwrap();
        m
    };
    let branch = model.branch("M").unwrap().id;
    let items = trainer::load_items(&manifest, dir.path(), "M", None, Split::Test).unwrap();
    let decode = DecodeConfig::greedy(model.config.chunk);
    let result = trainer::evaluate(&model, branch, &items, &decode).unwrap();
    // Chance for a vocabulary of 10 plus blank; allow twice that.
    let chance = 100.0 / 11.0;
    assert!(
        result.eval.token_accuracy <= 2.0 * chance,
        "untrained accuracy {}% suspiciously high",
        result.eval.token_accuracy
    );
}

#[test]
fn offline_decode_reports_ap_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), 15);
    let mut model = TransducerModel::new(small_config(), 16).unwrap();
    let branch = model.add_branch("M", 10, 17).unwrap();
    let items = trainer::load_items(&manifest, dir.path(), "M", None, Split::Train).unwrap();
    let cfg = TrainConfig {
        warmup_steps: 30,
        batch_size: 4,
        max_steps: 250,
        seed: 18,
        ..TrainConfig::defaults()
    };
    let spec = model.config.chunk;
    trainer::train(&mut model, &items, branch, &spec, &cfg, None).unwrap();

    let test_items = trainer::load_items(&manifest, dir.path(), "M", None, Split::Test).unwrap();
    let max_t = test_items.iter().map(|i| i.feats.t()).max().unwrap();
    let offline = model.config.spec_with(max_t, 0).unwrap();
    let result = trainer::evaluate(&model, branch, &test_items, &DecodeConfig::greedy(offline)).unwrap();
    let lat = result.latency.expect("trained model should emit tokens");
    assert_eq!(lat.ap, 1.0, "offline decoding must consume everything first");
    // Every per-utterance AL equals its own source length offline.
    for (id, l) in &lat.per_utterance {
        let rec = result.records.iter().find(|r| &r.utt_id == id).unwrap();
        assert!(
            (l.al - rec.source_len as f64).abs() < 1e-12,
            "{id}: AL {} vs |X| {}",
            l.al,
            rec.source_len
        );
    }
}

#[test]
fn expansion_freezes_encoder_and_isolates_branches() {
    let dir = tempfile::tempdir().unwrap();
    let suite = corpus::make_suite(2, 2, 10, 8, 25).unwrap();
    let pairs = vec![
        PairSpec::new("A", "M"),
        PairSpec::new("B", "M"),
        PairSpec::new("A", "N"),
    ];
    let gen = GenConfig {
        train_per_pair: 15,
        test_per_pair: 5,
        min_len: 3,
        max_len: 5,
        noise_sigma: 0.05,
        seed: 26,
    };
    let manifest = corpus::generate_corpus(&suite, &pairs, &gen, dir.path()).unwrap();

    let mut model = TransducerModel::new(small_config(), 27).unwrap();
    let branch_m = model.add_branch("M", 10, 28).unwrap();
    let items = trainer::load_items(&manifest, dir.path(), "M", None, Split::Train).unwrap();
    let cfg = TrainConfig {
        warmup_steps: 20,
        batch_size: 4,
        max_steps: 120,
        seed: 29,
        ..TrainConfig::defaults()
    };
    let spec = model.config.chunk;
    trainer::train(&mut model, &items, branch_m, &spec, &cfg, None).unwrap();

    let enc_before = model.params().bytes_of("encoder/");
    let m_before = model.params().bytes_of("branch/M/");
    let total_before = model.params().element_count("");

    // Decode snapshot of the original branch before expansion.
    let test_items = trainer::load_items(&manifest, dir.path(), "M", None, Split::Test).unwrap();
    let decode = DecodeConfig::greedy(spec);
    let before: Vec<_> = test_items
        .iter()
        .map(|i| greedy_stream_decode(&model, branch_m, &i.feats, &decode).unwrap())
        .collect();

    let plan = trainer::ExpansionPlan {
        new_lang: "N".into(),
        vocab_size: 10,
        sources: vec!["A".into()],
        branch_seed: 30,
        train: TrainConfig {
            warmup_steps: 20,
            batch_size: 4,
            max_steps: 80,
            seed: 31,
            ..TrainConfig::defaults()
        },
    };
    trainer::expand(&mut model, &manifest, dir.path(), &spec, &plan).unwrap();

    // Encoder and original branch bitwise untouched; footprint grows by
    // exactly the new branch.
    assert_eq!(model.params().bytes_of("encoder/"), enc_before);
    assert_eq!(model.params().bytes_of("branch/M/"), m_before);
    let added = model.params().element_count("") - total_before;
    assert_eq!(added, model.params().element_count("branch/N/"));

    for (i, item) in test_items.iter().enumerate() {
        let after = greedy_stream_decode(&model, branch_m, &item.feats, &decode).unwrap();
        assert_eq!(before[i].tokens, after.tokens, "{}", item.utt_id);
        assert_eq!(before[i].score.to_bits(), after.score.to_bits());
    }
}

#[test]
fn expansion_rejects_sources_without_data() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), 35); // pairs A>M, B>M only
    let mut model = TransducerModel::new(small_config(), 36).unwrap();
    model.add_branch("M", 10, 37).unwrap();
    let spec = model.config.chunk;
    let plan = trainer::ExpansionPlan {
        new_lang: "N".into(),
        vocab_size: 10,
        sources: vec!["A".into()],
        branch_seed: 38,
        train: TrainConfig::defaults(),
    };
    let err = trainer::expand(&mut model, &manifest, dir.path(), &spec, &plan)
        .unwrap_err()
        .to_string();
    assert!(err.contains("A>N"), "{err}");
}

#[test]
fn oracle_reference_bleu_is_one_hundred() {
    // The generator is its own translation oracle: rendering the stored
    // semantics through the target bijection reproduces the references.
    let dir = tempfile::tempdir().unwrap();
    let suite = corpus::make_suite(2, 2, 10, 8, 45).unwrap();
    let pairs = vec![PairSpec::new("A", "M"), PairSpec::new("B", "N")];
    let gen = GenConfig {
        train_per_pair: 10,
        test_per_pair: 5,
        min_len: 4,
        max_len: 6,
        noise_sigma: 0.05,
        seed: 46,
    };
    let manifest = corpus::generate_corpus(&suite, &pairs, &gen, dir.path()).unwrap();
    let refs: Vec<Vec<usize>> = manifest.rows.iter().map(|r| r.target_ids.clone()).collect();
    let oracle: Vec<Vec<usize>> = manifest
        .rows
        .iter()
        .map(|r| suite.render_text(&r.semantic_ids, &r.target_lang).unwrap())
        .collect();
    assert_eq!(streamtt::metrics::bleu(&refs, &oracle, 4).unwrap(), 100.0);
    assert_eq!(streamtt::metrics::wer(&refs, &oracle).unwrap(), 0.0);
}

/// The documented full toy run: three sources pooled into one target on the
/// defaults corpus at the desk-scale defaults reaches high held-out accuracy.
#[test]
fn full_toy_run_reaches_95_percent_heldout() {
    let dir = tempfile::tempdir().unwrap();
    let suite = corpus::make_suite(3, 1, 20, 16, 71).unwrap();
    let pairs = vec![
        PairSpec::new("A", "M"),
        PairSpec::new("B", "M"),
        PairSpec::new("C", "M"),
    ];
    let manifest =
        corpus::generate_corpus(&suite, &pairs, &GenConfig::defaults(72), dir.path()).unwrap();
    let mut model = TransducerModel::new(ModelConfig::desk_default(), 73).unwrap();
    let branch = model.add_branch("M", 20, 74).unwrap();
    let items = trainer::load_items(&manifest, dir.path(), "M", None, Split::Train).unwrap();
    let cfg = TrainConfig {
        seed: 75,
        ..TrainConfig::defaults()
    };
    let spec = model.config.chunk;
    trainer::train(&mut model, &items, branch, &spec, &cfg, None).unwrap();
    let test_items = trainer::load_items(&manifest, dir.path(), "M", None, Split::Test).unwrap();
    let eval = trainer::evaluate(&model, branch, &test_items, &DecodeConfig::greedy(spec)).unwrap();
    assert!(
        eval.eval.token_accuracy >= 95.0,
        "held-out accuracy {:.2}% below 95%",
        eval.eval.token_accuracy
    );
}

#[test]
fn snapshot_is_shareable_across_decoding_threads() {
    use std::sync::Arc;
    let mut model = TransducerModel::new(small_config(), 65).unwrap();
    model.add_branch("M", 10, 66).unwrap();
    let model = Arc::new(model);
    let branch = model.branch("M").unwrap().id;
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let vals: Vec<f64> = (0..10 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feats = FeatureSequence::new(Tensor::new(vec![10, 8], vals).unwrap()).unwrap();
    let config = DecodeConfig::greedy(model.config.chunk);

    let reference = greedy_stream_decode(&model, branch, &feats, &config).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let model = Arc::clone(&model);
            let feats = feats.clone();
            std::thread::spawn(move || {
                greedy_stream_decode(&model, branch, &feats, &config).unwrap()
            })
        })
        .collect();
    for h in handles {
        let hyp = h.join().unwrap();
        assert_eq!(hyp.tokens, reference.tokens);
        assert_eq!(hyp.score.to_bits(), reference.score.to_bits());
    }
}

#[test]
fn graph_encode_matches_inference_encode() {
    // Training-path values and inference-path values come from the same ops.
    let model = TransducerModel::new(small_config(), 55).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let vals: Vec<f64> = (0..9 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feats = FeatureSequence::new(Tensor::new(vec![9, 8], vals).unwrap()).unwrap();
    let spec = model.config.chunk;
    let inference = model.encode(&feats, &spec).unwrap();

    let mut g = streamtt::graph::Graph::new();
    let bound = model.bind(&mut g);
    let node = model.encode_graph(&mut g, &bound, &feats, &spec).unwrap();
    let training = g.value(node);
    assert_eq!(inference.values, training.values);
}
