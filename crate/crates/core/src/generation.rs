//! Topic-conditioned sentence generation: ancestral sampling, beam search
//! and per-topic representative words.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::model::{LstmState, ModelParams, OutputMode, TopicDecoder};
use crate::numerics::log_sum_exp_unchecked;

/// Words that commonly open a sentence. Editable; not a canonical list.
pub const DEFAULT_STOPLIST: &[&str] = &[
    "the", "a", "an", "he", "she", "it", "they", "we", "i", "you", "there", "this", "that", "these", "those", "his",
    "her", "its", "their", "in", "on", "at", "of", "and", "but", "or", "as", "for", "to", "with", "is", "was", "`",
    "``", "'", "''", "\"", ",", ".",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
    pub stoplist: Vec<String>,
    /// Resample UNK draws (up to 10 times per step) when sampling.
    pub avoid_unk: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            beam_size: 30,
            max_len: 25,
            temperature: 1.0,
            seed: 0,
            stoplist: DEFAULT_STOPLIST.iter().map(|s| s.to_string()).collect(),
            avoid_unk: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens; ends with EOS iff `finished`.
    pub token_ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn words(&self) -> &[usize] {
        match self.token_ids.split_last() {
            Some((&Vocabulary::EOS, rest)) => rest,
            _ => &self.token_ids,
        }
    }
}

const UNK_RETRIES: usize = 10;
const MAX_LEN_LIMIT: usize = 1 << 16;

fn draw(log_probs: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = log_probs.iter().map(|l| l / temperature).collect();
    let lse = log_sum_exp_unchecked(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, s) in scaled.iter().enumerate() {
        let p = (s - lse).exp();
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn sample_with(decoder: &TopicDecoder<'_>, config: &GenConfig, rng: &mut ChaCha8Rng) -> Hypothesis {
    let mut state = decoder.initial_state();
    let mut prev = Vocabulary::BOS;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < config.max_len {
        let (next, logp) = decoder.step(&state, prev);
        let mut w = draw(&logp, config.temperature, rng);
        if config.avoid_unk {
            for _ in 0..UNK_RETRIES {
                if w != Vocabulary::UNK {
                    break;
                }
                w = draw(&logp, config.temperature, rng);
            }
        }
        log_prob += logp[w];
        tokens.push(w);
        if w == Vocabulary::EOS {
            return Hypothesis {
                token_ids: tokens,
                log_prob,
                finished: true,
            };
        }
        state = next;
        prev = w;
    }
    Hypothesis {
        token_ids: tokens,
        log_prob,
        finished: false,
    }
}

fn sample_rng(seed: u64, call_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(call_index);
    rng
}

fn check(config: &GenConfig) -> Result<()> {
    config.validate()?;
    if config.max_len > MAX_LEN_LIMIT {
        return Err(Error::Config(format!("max_len above {MAX_LEN_LIMIT}")));
    }
    Ok(())
}

/// Ancestral sample from BOS with temperature applied to the log-probabilities.
/// `log_prob` is scored under the untempered model.
pub fn sample_sentence(topic: usize, params: &ModelParams, mode: OutputMode, config: &GenConfig) -> Result<Hypothesis> {
    Ok(sample_sentences(topic, params, mode, config, 1)?.remove(0))
}

/// `count` samples; sample i uses its own random stream (seed, i).
pub fn sample_sentences(
    topic: usize,
    params: &ModelParams,
    mode: OutputMode,
    config: &GenConfig,
    count: usize,
) -> Result<Vec<Hypothesis>> {
    check(config)?;
    let decoder = TopicDecoder::new(params, topic, mode)?;
    Ok((0..count as u64)
        .map(|i| sample_with(&decoder, config, &mut sample_rng(config.seed, i)))
        .collect())
}

/// Argmax at every step (lowest id on ties).
pub fn greedy_decode(topic: usize, params: &ModelParams, mode: OutputMode, max_len: usize) -> Result<Hypothesis> {
    let decoder = TopicDecoder::new(params, topic, mode)?;
    let mut state = decoder.initial_state();
    let mut prev = Vocabulary::BOS;
    let mut hyp = Hypothesis {
        token_ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.token_ids.len() < max_len {
        let (next, logp) = decoder.step(&state, prev);
        let w = logp
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > logp[b] { i } else { b });
        hyp.log_prob += logp[w];
        hyp.token_ids.push(w);
        if w == Vocabulary::EOS {
            hyp.finished = true;
            break;
        }
        state = next;
        prev = w;
    }
    Ok(hyp)
}

struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    state: LstmState,
}

#[derive(Clone, Copy)]
struct Candidate {
    log_prob: f64,
    token: usize,
    parent: usize,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

/// Beam search without length normalization. Each step expands every live
/// hypothesis over the whole vocabulary and keeps the best `beam_size`
/// candidates; those ending in EOS leave the beam and join the final
/// ranking, as do live hypotheses cut off at `max_len`.
pub fn beam_search(
    topic: usize,
    params: &ModelParams,
    mode: OutputMode,
    config: &GenConfig,
) -> Result<Vec<Hypothesis>> {
    check(config)?;
    let decoder = TopicDecoder::new(params, topic, mode)?;
    let width = config.beam_size;
    let mut beam = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: decoder.initial_state(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..config.max_len {
        let mut candidates = Vec::new();
        let mut next_states = Vec::with_capacity(beam.len());
        for (parent, b) in beam.iter().enumerate() {
            let prev = b.tokens.last().copied().unwrap_or(Vocabulary::BOS);
            let (state, logp) = decoder.step(&b.state, prev);
            candidates.extend(logp.iter().enumerate().map(|(token, l)| Candidate {
                log_prob: b.log_prob + l,
                token,
                parent,
            }));
            next_states.push(state);
        }
        if candidates.len() > width {
            candidates.select_nth_unstable_by(width - 1, candidate_order);
            candidates.truncate(width);
        }
        candidates.sort_by(candidate_order);

        let mut next_beam = Vec::new();
        for c in candidates {
            let mut tokens = beam[c.parent].tokens.clone();
            tokens.push(c.token);
            if c.token == Vocabulary::EOS {
                finished.push(Hypothesis {
                    token_ids: tokens,
                    log_prob: c.log_prob,
                    finished: true,
                });
            } else {
                next_beam.push(Beam {
                    tokens,
                    log_prob: c.log_prob,
                    state: next_states[c.parent].clone(),
                });
            }
        }
        beam = next_beam;
        if beam.is_empty() {
            break;
        }
        // scores only fall from here, so a full set of better finished
        // hypotheses settles the result
        if finished.len() >= width {
            finished.sort_by(hypothesis_order);
            if finished[width - 1].log_prob >= beam[0].log_prob {
                beam.clear();
                break;
            }
        }
    }

    finished.extend(beam.into_iter().map(|b| Hypothesis {
        token_ids: b.tokens,
        log_prob: b.log_prob,
        finished: false,
    }));
    finished.sort_by(hypothesis_order);
    finished.truncate(width);
    Ok(finished)
}

/// Ranks the first-step distribution given BOS, drops reserved tokens and
/// the stoplist, and returns up to `n` (token id, probability) pairs.
pub fn top_words(
    topic: usize,
    params: &ModelParams,
    mode: OutputMode,
    vocabulary: &Vocabulary,
    n: usize,
    stoplist: &[String],
) -> Result<Vec<(usize, f64)>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    if vocabulary.len() != params.dims.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary has {} tokens, model expects {}",
            vocabulary.len(),
            params.dims.vocab_size
        )));
    }
    let decoder = TopicDecoder::new(params, topic, mode)?;
    let (_, logp) = decoder.step(&decoder.initial_state(), Vocabulary::BOS);
    let stopped: Vec<usize> = stoplist.iter().filter_map(|w| vocabulary.id(w)).collect();
    let mut ranked: Vec<(usize, f64)> = logp
        .iter()
        .enumerate()
        .filter(|(id, _)| !vocabulary.is_reserved_id(*id) && !stopped.contains(id))
        .map(|(id, l)| (id, l.exp()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    Ok(ranked)
}

/// `topic_id<TAB>log_prob<TAB>sentence`
pub fn format_hypothesis(topic: usize, hyp: &Hypothesis, vocabulary: &Vocabulary) -> String {
    let words: Vec<&str> = hyp
        .words()
        .iter()
        .map(|&id| vocabulary.token(id).unwrap_or(UNK_TOKEN))
        .collect();
    format!("{topic}\t{}\t{}", hyp.log_prob, words.join(" "))
}

/// `topic_id<TAB>rank<TAB>token<TAB>prob`, ranks from 1.
pub fn format_top_words(topic: usize, words: &[(usize, f64)], vocabulary: &Vocabulary) -> String {
    words
        .iter()
        .enumerate()
        .map(|(rank, &(id, p))| {
            format!(
                "{topic}\t{}\t{}\t{p}\n",
                rank + 1,
                vocabulary.token(id).unwrap_or(UNK_TOKEN)
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn tiny(seed: u64, vocab_size: usize) -> ModelParams {
        let dims = ModelDims {
            vocab_size,
            topics: 2,
            d_w: 3,
            d_k: 2,
            d_h: 4,
            d_s: 3,
        };
        let mut p = ModelParams::init(dims, crate::model::ProjectionInit::Orthogonal, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in p.blocks_mut() {
            for v in block.as_mut_slice() {
                *v = rng.random_range(-1.5..1.5);
            }
        }
        p
    }

    /// All output scores zero except a large EOS bias.
    fn eos_model() -> ModelParams {
        let mut p = ModelParams::zeros(ModelDims {
            vocab_size: 5,
            topics: 1,
            d_w: 2,
            d_k: 2,
            d_h: 2,
            d_s: 2,
        });
        p.bias.set(0, 0, 1.0);
        p.word_out_emb.set(Vocabulary::EOS, 0, 1e4);
        p
    }

    #[test]
    fn forced_eos_gives_empty_sentence() {
        let p = eos_model();
        for seed in 0..20 {
            let cfg = GenConfig {
                seed,
                ..Default::default()
            };
            let h = sample_sentence(0, &p, OutputMode::SoftmaxLogit, &cfg).unwrap();
            assert_eq!(h.token_ids, vec![Vocabulary::EOS]);
            assert!(h.words().is_empty());
            assert!(h.finished);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_capped() {
        let p = tiny(2, 7);
        let cfg = GenConfig {
            max_len: 6,
            ..Default::default()
        };
        let a = sample_sentences(1, &p, OutputMode::SoftmaxLogit, &cfg, 30).unwrap();
        let b = sample_sentences(1, &p, OutputMode::SoftmaxLogit, &cfg, 30).unwrap();
        assert_eq!(a, b);
        let decoder = TopicDecoder::new(&p, 1, OutputMode::SoftmaxLogit).unwrap();
        for h in &a {
            assert!(h.token_ids.len() <= 6);
            assert_eq!(h.finished, h.token_ids.last() == Some(&Vocabulary::EOS));
            assert!((decoder.sequence_log_prob(&h.token_ids) - h.log_prob).abs() < 1e-9);
        }
        assert_eq!(a[0], sample_sentence(1, &p, OutputMode::SoftmaxLogit, &cfg).unwrap());
    }

    #[test]
    fn cold_sampling_follows_greedy_path() {
        let p = tiny(5, 6);
        let greedy = greedy_decode(0, &p, OutputMode::SoftmaxLogit, 8).unwrap();
        let cfg = GenConfig {
            temperature: 1e-4,
            max_len: 8,
            ..Default::default()
        };
        for h in sample_sentences(0, &p, OutputMode::SoftmaxLogit, &cfg, 10).unwrap() {
            assert_eq!(h.token_ids, greedy.token_ids);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..10 {
            let p = tiny(seed, 6);
            for mode in [OutputMode::SoftmaxLogit, OutputMode::NormalizedSigmoid] {
                let cfg = GenConfig {
                    beam_size: 1,
                    max_len: 7,
                    ..Default::default()
                };
                let beam = beam_search(1, &p, mode, &cfg).unwrap();
                assert_eq!(beam.len(), 1);
                assert_eq!(beam[0], greedy_decode(1, &p, mode, 7).unwrap());
            }
        }
    }

    #[test]
    fn beam_scores_are_consistent_and_sorted() {
        let p = tiny(9, 8);
        let cfg = GenConfig {
            beam_size: 10,
            max_len: 5,
            ..Default::default()
        };
        let beam = beam_search(0, &p, OutputMode::SoftmaxLogit, &cfg).unwrap();
        assert_eq!(beam.len(), 10);
        let decoder = TopicDecoder::new(&p, 0, OutputMode::SoftmaxLogit).unwrap();
        for pair in beam.windows(2) {
            assert!(pair[0].log_prob >= pair[1].log_prob);
        }
        for h in &beam {
            assert!(h.token_ids.len() <= 5);
            assert!((decoder.sequence_log_prob(&h.token_ids) - h.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn top_words_filters_and_ranks() {
        let vocab = crate::corpus::build_vocabulary(["x", "y", "z", "the", "x"], 1).unwrap();
        let p = tiny(4, vocab.len());
        let all = top_words(0, &p, OutputMode::SoftmaxLogit, &vocab, 100, &[]).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.iter().all(|(id, _)| !vocab.is_reserved_id(*id)));
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        let stopped = top_words(0, &p, OutputMode::SoftmaxLogit, &vocab, 100, &["the".to_string()]).unwrap();
        assert_eq!(stopped.len(), 3);
        assert!(stopped.iter().all(|(id, _)| vocab.token(*id) != Some("the")));
        let text = format_top_words(0, &stopped[..2], &vocab);
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("0\t1\t"));
    }

    #[test]
    fn duplicate_output_embeddings_rank_adjacently_by_id() {
        let vocab = crate::corpus::build_vocabulary(["a", "b", "c", "d"], 1).unwrap();
        let mut p = tiny(6, vocab.len());
        let (ia, ib) = (vocab.id("b").unwrap(), vocab.id("d").unwrap());
        // make the pair the clear favourite
        for c in 0..p.dims.d_s {
            let v = 6.0 * p.bias.get(0, c).signum();
            p.word_out_emb.set(ia, c, v);
            p.word_out_emb.set(ib, c, v);
        }
        p.proj_h.fill(0.0);
        p.proj_y.fill(0.0);
        p.proj_k.fill(0.0);
        let ranked = top_words(0, &p, OutputMode::SoftmaxLogit, &vocab, 2, &[]).unwrap();
        assert_eq!(ranked[0].0, ia.min(ib));
        assert_eq!(ranked[1].0, ia.max(ib));
        assert_eq!(ranked[0].1, ranked[1].1);
    }

    #[test]
    fn invalid_config_rejected() {
        let p = tiny(1, 5);
        for cfg in [
            GenConfig {
                beam_size: 0,
                ..Default::default()
            },
            GenConfig {
                max_len: 0,
                ..Default::default()
            },
            GenConfig {
                temperature: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                beam_search(0, &p, OutputMode::SoftmaxLogit, &cfg),
                Err(Error::Config(_))
            ));
        }
        assert!(matches!(
            sample_sentence(2, &p, OutputMode::SoftmaxLogit, &GenConfig::default()),
            Err(Error::InvalidTopic { .. })
        ));
    }
}
