//! Shared helpers for integration and acceptance tests: a from-scratch
//! reference forward pass, a hand-built generating model for synthetic
//! corpora, and small baselines.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use slrtm::corpus::{Corpus, Document, Sentence, Vocabulary};
use slrtm::model::{ModelDims, ModelParams, OutputMode};

pub fn random_params(dims: ModelDims, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for block in p.blocks_mut() {
        for v in block.as_mut_slice() {
            *v = rng.random_range(-scale..scale);
        }
    }
    p
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(m: &slrtm::numerics::DenseMatrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum())
        .collect()
}

/// Per-step log P(token | history, topic), written independently of the
/// library's forward pass.
pub fn reference_step_log_probs(params: &ModelParams, tokens: &[usize], topic: usize, mode: OutputMode) -> Vec<f64> {
    let d_h = params.dims.d_h;
    let k = params.topic_emb.row(topic).to_vec();
    let mut h = vec![0.0; d_h];
    let mut c = vec![0.0; d_h];
    let mut prev = Vocabulary::BOS;
    let mut out = Vec::new();
    for &t in tokens {
        let y = params.word_in_emb.row(prev).to_vec();
        let x: Vec<f64> = y.iter().chain(&k).copied().collect();
        let zx = matvec(&params.lstm_wx, &x);
        let zh = matvec(&params.lstm_wh, &h);
        let z: Vec<f64> = (0..4 * d_h)
            .map(|j| zx[j] + zh[j] + params.lstm_bias.get(0, j))
            .collect();
        for j in 0..d_h {
            let i = sigm(z[j]);
            let f = sigm(z[d_h + j]);
            let g = z[2 * d_h + j].tanh();
            let o = sigm(z[3 * d_h + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        let a1 = matvec(&params.proj_h, &h);
        let a2 = matvec(&params.proj_y, &y);
        let a3 = matvec(&params.proj_k, &k);
        let u: Vec<f64> = (0..a1.len())
            .map(|s| a1[s] + a2[s] + a3[s] + params.bias.get(0, s))
            .collect();
        let scores: Vec<f64> = matvec(&params.word_out_emb, &u)
            .into_iter()
            .map(|a| match mode {
                OutputMode::SoftmaxLogit => a,
                OutputMode::NormalizedSigmoid => sigm(a).ln(),
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        out.push(scores[t] - log_z);
        prev = t;
    }
    out
}

pub fn reference_log_prob(params: &ModelParams, tokens: &[usize], topic: usize, mode: OutputMode) -> f64 {
    reference_step_log_probs(params, tokens, topic, mode).iter().sum()
}

/// Generating model for synthetic corpora. Each topic owns a block of
/// `words_per_topic` content words; a sentence's words come mostly from
/// its topic's block and it ends with EOS at a roughly constant rate.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub words_per_topic: usize,
    /// Log-weight of in-topic words relative to other content words.
    pub topic_strength: f64,
    /// Log-weight of EOS (not allowed as the first token).
    pub eos_strength: f64,
    pub alpha: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    /// K=3 and 27 content words, 30 token ids with the reserved three.
    pub fn three_topics() -> Self {
        Self {
            topics: 3,
            words_per_topic: 9,
            topic_strength: 4.0,
            eos_strength: 4.6,
            alpha: 0.5,
            min_sentences: 5,
            max_sentences: 10,
            max_len: 20,
        }
    }

    pub fn vocab_size(&self) -> usize {
        3 + self.topics * self.words_per_topic
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let counts: HashMap<String, u64> = (0..self.topics)
            .flat_map(|k| (0..self.words_per_topic).map(move |i| (format!("t{k}w{i}"), 1)))
            .collect();
        Vocabulary::from_counts(counts, 1).unwrap()
    }

    /// Unnormalized next-token weights over token ids.
    pub fn weights(&self, vocab: &Vocabulary, topic: usize, prev: usize) -> Vec<f64> {
        let mut w = vec![0.0; vocab.len()];
        for k in 0..self.topics {
            for i in 0..self.words_per_topic {
                let id = vocab.id(&format!("t{k}w{i}")).unwrap();
                w[id] = if k == topic { self.topic_strength.exp() } else { 1.0 };
            }
        }
        if prev != Vocabulary::BOS {
            w[Vocabulary::EOS] = self.eos_strength.exp();
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDoc {
    /// Word ids per sentence, EOS excluded.
    pub sentences: Vec<Vec<usize>>,
    pub topics: Vec<usize>,
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap()
}

/// Documents whose topic mixture is Dirichlet over `support`.
pub fn generate(
    spec: &SyntheticSpec,
    vocab: &Vocabulary,
    n_docs: usize,
    support: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<SyntheticDoc> {
    let gamma = Gamma::new(spec.alpha, 1.0).unwrap();
    (0..n_docs)
        .map(|_| {
            let draws: Vec<f64> = support.iter().map(|_| gamma.sample(rng).max(1e-300)).collect();
            let n = rng.random_range(spec.min_sentences..=spec.max_sentences);
            let mut doc = SyntheticDoc {
                sentences: Vec::new(),
                topics: Vec::new(),
            };
            for _ in 0..n {
                let topic = support[categorical(&draws, rng)];
                let mut words = Vec::new();
                let mut prev = Vocabulary::BOS;
                while words.len() < spec.max_len {
                    let w = categorical(&spec.weights(vocab, topic, prev), rng);
                    if w == Vocabulary::EOS {
                        break;
                    }
                    words.push(w);
                    prev = w;
                }
                doc.sentences.push(words);
                doc.topics.push(topic);
            }
            doc
        })
        .collect()
}

pub fn to_corpus(docs: &[SyntheticDoc], vocab: &Vocabulary, prefix: &str) -> Corpus {
    Corpus {
        documents: docs
            .iter()
            .enumerate()
            .map(|(i, d)| Document {
                doc_id: format!("{prefix}{i}"),
                sentences: d
                    .sentences
                    .iter()
                    .map(|s| Sentence::from_words(s, vocab.len()).unwrap())
                    .collect(),
                labels: None,
            })
            .collect(),
        vocabulary: vocab.clone(),
        label_names: None,
    }
}

/// Unigram MLE over training words (EOS excluded), perplexity on test words.
pub fn unigram_perplexity(train: &Corpus, test: &Corpus) -> f64 {
    let mut counts = vec![0u64; train.vocabulary.len()];
    let mut total = 0u64;
    for s in train.documents.iter().flat_map(|d| &d.sentences) {
        for &w in s.words() {
            counts[w] += 1;
            total += 1;
        }
    }
    let mut log_prob = 0.0;
    let mut n = 0usize;
    for s in test.documents.iter().flat_map(|d| &d.sentences) {
        for &w in s.words() {
            log_prob += (counts[w] as f64 / total as f64).ln();
            n += 1;
        }
    }
    (-log_prob / n as f64).exp()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best agreement between predicted and true labels over all relabelings.
pub fn best_permutation_accuracy(predicted: &[usize], truth: &[usize], k: usize) -> f64 {
    let best = permutations(k)
        .iter()
        .map(|perm| predicted.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count())
        .max()
        .unwrap_or(0);
    best as f64 / truth.len() as f64
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}
