mod common;

use common::{generate, to_corpus, SyntheticSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slrtm::evaluation::{doc_vectors, perplexity, LikelihoodEstimator, PerplexityOptions};
use slrtm::inference::{train, TrainConfig};
use slrtm::model::checkpoint::Checkpoint;
use slrtm::Error;

fn corpora() -> (slrtm::corpus::Corpus, slrtm::corpus::Corpus) {
    let spec = SyntheticSpec::three_topics();
    let vocab = spec.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let train_c = to_corpus(&generate(&spec, &vocab, 30, &[0, 1, 2], &mut rng), &vocab, "a");
    let test_c = to_corpus(&generate(&spec, &vocab, 8, &[0, 1, 2], &mut rng), &vocab, "b");
    (train_c, test_c)
}

fn config(topics: usize) -> TrainConfig {
    TrainConfig {
        topics,
        d_w: 6,
        d_k: 4,
        d_h: 8,
        epochs: 1,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn single_topic_estimators_agree() {
    let (train_c, test_c) = corpora();
    let cfg = config(1);
    let out = train(&train_c, &cfg).unwrap();
    let report = perplexity(
        &test_c,
        &out.params,
        &train_c.vocabulary,
        &cfg,
        &PerplexityOptions::default(),
    )
    .unwrap();
    assert!((report.total_log_prob - report.total_elbo).abs() < 1e-9);
    let elbo_opts = PerplexityOptions {
        estimator: LikelihoodEstimator::Elbo,
        ..Default::default()
    };
    let by_elbo = perplexity(&test_c, &out.params, &train_c.vocabulary, &cfg, &elbo_opts).unwrap();
    assert!((by_elbo.perplexity - report.perplexity).abs() < 1e-9);
}

#[test]
fn report_is_consistent_and_thread_invariant() {
    let (train_c, test_c) = corpora();
    let cfg = config(3);
    let out = train(&train_c, &cfg).unwrap();
    let one = perplexity(
        &test_c,
        &out.params,
        &train_c.vocabulary,
        &cfg,
        &PerplexityOptions::default(),
    )
    .unwrap();
    let many = perplexity(
        &test_c,
        &out.params,
        &train_c.vocabulary,
        &cfg,
        &PerplexityOptions {
            threads: 4,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(one, many);
    let words: usize = test_c.documents.iter().map(|d| d.word_count()).sum();
    assert_eq!(one.word_count, words);
    assert_eq!(one.documents.len(), test_c.documents.len());
    let sum: f64 = one.documents.iter().map(|d| d.log_prob).sum();
    assert!((sum - one.total_log_prob).abs() < 1e-9);
    assert!(((-one.total_log_prob / words as f64).exp() - one.perplexity).abs() < 1e-9);

    let with_eos = perplexity(
        &test_c,
        &out.params,
        &train_c.vocabulary,
        &cfg,
        &PerplexityOptions {
            count_eos: true,
            ..Default::default()
        },
    )
    .unwrap();
    let sentences: usize = test_c.documents.iter().map(|d| d.sentences.len()).sum();
    assert_eq!(with_eos.word_count, words + sentences);
    assert!(with_eos.perplexity < one.perplexity);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (train_c, mut test_c) = corpora();
    let cfg = config(2);
    let out = train(&train_c, &cfg).unwrap();
    let other = SyntheticSpec {
        words_per_topic: 8,
        ..SyntheticSpec::three_topics()
    }
    .vocabulary();
    test_c.vocabulary = other;
    assert!(matches!(
        perplexity(
            &test_c,
            &out.params,
            &train_c.vocabulary,
            &cfg,
            &PerplexityOptions::default()
        ),
        Err(Error::VocabularyMismatch { .. })
    ));
}

#[test]
fn doc_vectors_are_normalized_gammas() {
    let (train_c, test_c) = corpora();
    let cfg = config(3);
    let out = train(&train_c, &cfg).unwrap();
    let single = doc_vectors(&test_c, &out.params, &cfg, 1).unwrap();
    let parallel = doc_vectors(&test_c, &out.params, &cfg, 3).unwrap();
    assert_eq!(single, parallel);
    for row in &single {
        assert_eq!(row.len(), 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| *v > 0.0));
    }
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let (train_c, test_c) = corpora();
    let cfg = config(2);
    let out = train(&train_c, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint {
        params: out.params,
        vocabulary: train_c.vocabulary.clone(),
        mode: cfg.mode,
        metadata: Default::default(),
    };
    ck.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    let mut rounded = ck.params.clone();
    for b in rounded.blocks_mut() {
        b.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    assert_eq!(loaded.params, rounded);
    let a = perplexity(
        &test_c,
        &loaded.params,
        &loaded.vocabulary,
        &cfg,
        &PerplexityOptions::default(),
    )
    .unwrap();
    let b = perplexity(
        &test_c,
        &rounded,
        &train_c.vocabulary,
        &cfg,
        &PerplexityOptions::default(),
    )
    .unwrap();
    assert_eq!(a, b);
}
