//! Topic-conditioned LSTM sentence model.
//!
//! Each step feeds `x = [y_{t-1}; k]` through a single LSTM layer and scores
//! every word `w` with `a_w = w'·(W₁h_t + W₂y_{t-1} + W₃k + b)`. The word
//! distribution normalizes either `exp(a_w)` (softmax-logit mode) or `σ(a_w)`
//! (normalized-sigmoid mode). Both modes reduce to `log p = ℓ − LSE(ℓ)` with
//! `ℓ = a` or `ℓ = log σ(a)`, which is what the forward and backward passes
//! work with.

pub mod checkpoint;

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{
    axpy, log_sigmoid, log_sum_exp_unchecked, orthogonal_matrix_with, sigmoid, softmax_in_place, DenseMatrix,
};

pub const EMBEDDING_INIT_RANGE: f64 = 0.015;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    #[default]
    SoftmaxLogit,
    NormalizedSigmoid,
}

impl OutputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputMode::SoftmaxLogit => "softmax-logit",
            OutputMode::NormalizedSigmoid => "normalized-sigmoid",
        }
    }
}

impl std::str::FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-logit" | "softmax" => Ok(OutputMode::SoftmaxLogit),
            "normalized-sigmoid" | "sigmoid" => Ok(OutputMode::NormalizedSigmoid),
            other => Err(Error::Config(format!("unknown output mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionInit {
    #[default]
    Orthogonal,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub topics: usize,
    pub d_w: usize,
    pub d_k: usize,
    pub d_h: usize,
    pub d_s: usize,
}

impl ModelDims {
    /// Quantitative-experiment sizes (128/128/600), `d_s = d_w`.
    pub fn standard(vocab_size: usize, topics: usize) -> Self {
        Self {
            vocab_size,
            topics,
            d_w: 128,
            d_k: 128,
            d_h: 600,
            d_s: 128,
        }
    }

    /// Larger sizes used for sentence generation (512/1024/1024).
    pub fn generation(vocab_size: usize, topics: usize) -> Self {
        Self {
            vocab_size,
            topics,
            d_w: 512,
            d_k: 1024,
            d_h: 1024,
            d_s: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("vocab_size", self.vocab_size),
            ("topics", self.topics),
            ("d_w", self.d_w),
            ("d_k", self.d_k),
            ("d_h", self.d_h),
            ("d_s", self.d_s),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size <= Vocabulary::UNK {
            return Err(Error::Config("vocabulary must hold the reserved tokens".into()));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.d_w + self.d_k
    }
}

pub const BLOCK_NAMES: [&str; 10] = [
    "word_in_emb",
    "word_out_emb",
    "topic_emb",
    "lstm_wx",
    "lstm_wh",
    "lstm_bias",
    "proj_h",
    "proj_y",
    "proj_k",
    "bias",
];

/// All trainable parameters. LSTM gate rows are stacked as
/// input, forget, candidate, output (each `d_h` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub word_in_emb: DenseMatrix,
    pub word_out_emb: DenseMatrix,
    pub topic_emb: DenseMatrix,
    pub lstm_wx: DenseMatrix,
    pub lstm_wh: DenseMatrix,
    pub lstm_bias: DenseMatrix,
    pub proj_h: DenseMatrix,
    pub proj_y: DenseMatrix,
    pub proj_k: DenseMatrix,
    pub bias: DenseMatrix,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            vocab_size: v,
            topics: k,
            d_w,
            d_k,
            d_h,
            d_s,
        } = dims;
        Self {
            dims,
            word_in_emb: DenseMatrix::zeros(v, d_w),
            word_out_emb: DenseMatrix::zeros(v, d_s),
            topic_emb: DenseMatrix::zeros(k, d_k),
            lstm_wx: DenseMatrix::zeros(4 * d_h, d_w + d_k),
            lstm_wh: DenseMatrix::zeros(4 * d_h, d_h),
            lstm_bias: DenseMatrix::zeros(1, 4 * d_h),
            proj_h: DenseMatrix::zeros(d_s, d_h),
            proj_y: DenseMatrix::zeros(d_s, d_w),
            proj_k: DenseMatrix::zeros(d_s, d_k),
            bias: DenseMatrix::zeros(1, d_s),
        }
    }

    /// Embeddings U(−0.015, 0.015); LSTM gate blocks orthogonal; biases
    /// zero except the forget gate (1.0); projections orthogonal or uniform.
    pub fn init(dims: ModelDims, projection: ProjectionInit, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = EMBEDDING_INIT_RANGE;
        let mut p = Self::zeros(dims);
        p.word_in_emb = DenseMatrix::uniform(dims.vocab_size, dims.d_w, -r, r, &mut rng);
        p.word_out_emb = DenseMatrix::uniform(dims.vocab_size, dims.d_s, -r, r, &mut rng);
        p.topic_emb = DenseMatrix::uniform(dims.topics, dims.d_k, -r, r, &mut rng);
        let d_h = dims.d_h;
        for gate in 0..4 {
            let wx = orthogonal_matrix_with(d_h, dims.input_size(), &mut rng);
            let wh = orthogonal_matrix_with(d_h, d_h, &mut rng);
            for row in 0..d_h {
                p.lstm_wx.row_mut(gate * d_h + row).copy_from_slice(wx.row(row));
                p.lstm_wh.row_mut(gate * d_h + row).copy_from_slice(wh.row(row));
            }
        }
        p.lstm_bias.as_mut_slice()[d_h..2 * d_h].fill(FORGET_BIAS_INIT);
        let mut projection_block = |rows: usize, cols: usize| match projection {
            ProjectionInit::Orthogonal => orthogonal_matrix_with(rows, cols, &mut rng),
            ProjectionInit::Uniform => DenseMatrix::uniform(rows, cols, -r, r, &mut rng),
        };
        p.proj_h = projection_block(dims.d_s, dims.d_h);
        p.proj_y = projection_block(dims.d_s, dims.d_w);
        p.proj_k = projection_block(dims.d_s, dims.d_k);
        Ok(p)
    }

    pub fn blocks(&self) -> [&DenseMatrix; 10] {
        [
            &self.word_in_emb,
            &self.word_out_emb,
            &self.topic_emb,
            &self.lstm_wx,
            &self.lstm_wh,
            &self.lstm_bias,
            &self.proj_h,
            &self.proj_y,
            &self.proj_k,
            &self.bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut DenseMatrix; 10] {
        [
            &mut self.word_in_emb,
            &mut self.word_out_emb,
            &mut self.topic_emb,
            &mut self.lstm_wx,
            &mut self.lstm_wh,
            &mut self.lstm_bias,
            &mut self.proj_h,
            &mut self.proj_y,
            &mut self.proj_k,
            &mut self.bias,
        ]
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.as_slice().len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }

    fn check_topic(&self, topic: usize) -> Result<()> {
        if topic >= self.dims.topics {
            return Err(Error::InvalidTopic {
                topic,
                topics: self.dims.topics,
            });
        }
        Ok(())
    }

    fn check_sentence(&self, sentence: &Sentence) -> Result<()> {
        if let Some(&bad) = sentence.token_ids().iter().find(|&&id| id >= self.dims.vocab_size) {
            return Err(Error::InvalidSentence(format!(
                "token id {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        Ok(())
    }

    /// `W₃k + b` for one topic; constant across the steps of a sentence.
    fn topic_term(&self, topic_emb: &[f64]) -> Vec<f64> {
        let mut t = self.bias.as_slice().to_vec();
        self.proj_k.gemv_acc(topic_emb, &mut t);
        t
    }
}

/// Gradients, shape-congruent with the parameters they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(ModelParams);

impl ParamGrads {
    pub fn zeros(dims: ModelDims) -> Self {
        Self(ModelParams::zeros(dims))
    }

    pub fn clear(&mut self) {
        for b in self.0.blocks_mut() {
            b.fill(0.0);
        }
    }

    /// `self += weight * other`
    pub fn add_scaled(&mut self, weight: f64, other: &ParamGrads) {
        for (a, b) in self.0.blocks_mut().into_iter().zip(other.0.blocks()) {
            axpy(weight, b.as_slice(), a.as_mut_slice());
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .blocks()
            .iter()
            .flat_map(|b| b.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn into_inner(self) -> ModelParams {
        self.0
    }
}

impl Deref for ParamGrads {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for ParamGrads {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(d_h: usize) -> Self {
        Self {
            h: vec![0.0; d_h],
            c: vec![0.0; d_h],
        }
    }
}

/// Activations of one LSTM step, kept for the backward pass.
#[derive(Debug, Clone)]
struct CellCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates, stacked i, f, g, o.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn cell_forward(
    params: &ModelParams,
    h_prev: &[f64],
    c_prev: &[f64],
    word_emb: &[f64],
    topic_emb: &[f64],
) -> CellCache {
    let d_h = params.dims.d_h;
    let mut x = Vec::with_capacity(word_emb.len() + topic_emb.len());
    x.extend_from_slice(word_emb);
    x.extend_from_slice(topic_emb);
    let mut gates = params.lstm_bias.as_slice().to_vec();
    params.lstm_wx.gemv_acc(&x, &mut gates);
    params.lstm_wh.gemv_acc(h_prev, &mut gates);
    for (j, z) in gates.iter_mut().enumerate() {
        *z = if (2 * d_h..3 * d_h).contains(&j) {
            z.tanh()
        } else {
            sigmoid(*z)
        };
    }
    let mut c = vec![0.0; d_h];
    let mut tanh_c = vec![0.0; d_h];
    let mut h = vec![0.0; d_h];
    for j in 0..d_h {
        let (i, f, g, o) = (gates[j], gates[d_h + j], gates[2 * d_h + j], gates[3 * d_h + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    CellCache {
        x,
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        c,
        tanh_c,
        h,
    }
}

/// One LSTM update with input `[word_emb; topic_emb]`.
pub fn lstm_step(state: &LstmState, word_emb: &[f64], topic_emb: &[f64], params: &ModelParams) -> Result<LstmState> {
    let d = params.dims;
    if state.h.len() != d.d_h || state.c.len() != d.d_h || word_emb.len() != d.d_w || topic_emb.len() != d.d_k {
        return Err(Error::ShapeMismatch("lstm_step inputs".into()));
    }
    let cache = cell_forward(params, &state.h, &state.c, word_emb, topic_emb);
    Ok(LstmState { h: cache.h, c: cache.c })
}

/// Output projection `u = (W₃k + b) + W₁h + W₂y` followed by the
/// per-word log-scores ℓ (before normalization).
fn output_scores(
    params: &ModelParams,
    h: &[f64],
    prev_emb: &[f64],
    topic_term: &[f64],
    mode: OutputMode,
) -> (Vec<f64>, Vec<f64>) {
    let mut u = topic_term.to_vec();
    params.proj_h.gemv_acc(h, &mut u);
    params.proj_y.gemv_acc(prev_emb, &mut u);
    let mut ell = vec![0.0; params.dims.vocab_size];
    params.word_out_emb.gemv_acc(&u, &mut ell);
    if mode == OutputMode::NormalizedSigmoid {
        ell.iter_mut().for_each(|a| *a = log_sigmoid(*a));
    }
    (u, ell)
}

/// Distribution over the vocabulary given the already-updated hidden
/// state `h_t`, the previous word's embedding and the topic embedding.
pub fn word_distribution(
    state: &LstmState,
    prev_word_emb: &[f64],
    topic_emb: &[f64],
    params: &ModelParams,
    mode: OutputMode,
) -> Result<Vec<f64>> {
    let d = params.dims;
    if state.h.len() != d.d_h || prev_word_emb.len() != d.d_w || topic_emb.len() != d.d_k {
        return Err(Error::ShapeMismatch("word_distribution inputs".into()));
    }
    let term = params.topic_term(topic_emb);
    let (_, mut ell) = output_scores(params, &state.h, prev_word_emb, &term, mode);
    softmax_in_place(&mut ell);
    Ok(ell)
}

/// Incremental decoder for one topic, used by generation and by tests
/// that re-evaluate a sentence step by step.
#[derive(Debug, Clone)]
pub struct TopicDecoder<'a> {
    params: &'a ModelParams,
    topic: usize,
    topic_term: Vec<f64>,
    mode: OutputMode,
}

impl<'a> TopicDecoder<'a> {
    pub fn new(params: &'a ModelParams, topic: usize, mode: OutputMode) -> Result<Self> {
        params.check_topic(topic)?;
        Ok(Self {
            params,
            topic,
            topic_term: params.topic_term(params.topic_emb.row(topic)),
            mode,
        })
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(self.params.dims.d_h)
    }

    /// Consumes `prev` and returns the next state with log P(· | history).
    pub fn step(&self, state: &LstmState, prev: usize) -> (LstmState, Vec<f64>) {
        let p = self.params;
        let y = p.word_in_emb.row(prev);
        let cache = cell_forward(p, &state.h, &state.c, y, p.topic_emb.row(self.topic));
        let (_, mut ell) = output_scores(p, &cache.h, y, &self.topic_term, self.mode);
        let lse = log_sum_exp_unchecked(&ell);
        ell.iter_mut().for_each(|v| *v -= lse);
        (LstmState { h: cache.h, c: cache.c }, ell)
    }

    /// Σ log P over `tokens`, starting from BOS. Accepts unfinished
    /// sequences (no EOS).
    pub fn sequence_log_prob(&self, tokens: &[usize]) -> f64 {
        let mut state = self.initial_state();
        let mut prev = Vocabulary::BOS;
        let mut total = 0.0;
        for &t in tokens {
            let (next, logp) = self.step(&state, prev);
            total += logp[t];
            state = next;
            prev = t;
        }
        total
    }
}

struct StepRecord {
    cell: CellCache,
    prev: usize,
    target: usize,
    u: Vec<f64>,
    /// log P(w | history) for every w
    log_probs: Vec<f64>,
    /// pre-sigmoid scores, only needed in sigmoid mode
    scores: Option<Vec<f64>>,
}

/// Runs the sentence forward; returns β and, when asked, the per-step
/// records for backpropagation.
fn forward(
    params: &ModelParams,
    sentence: &Sentence,
    topic: usize,
    mode: OutputMode,
    keep: bool,
) -> (f64, Vec<StepRecord>, Vec<f64>) {
    let d_h = params.dims.d_h;
    let topic_emb = params.topic_emb.row(topic);
    let term = params.topic_term(topic_emb);
    let mut h = vec![0.0; d_h];
    let mut c = vec![0.0; d_h];
    let mut prev = Vocabulary::BOS;
    let mut beta = 0.0;
    let mut records = Vec::new();
    for &target in sentence.token_ids() {
        let y = params.word_in_emb.row(prev);
        let cell = cell_forward(params, &h, &c, y, topic_emb);
        let (u, mut ell) = output_scores(params, &cell.h, y, &term, mode);
        let lse = log_sum_exp_unchecked(&ell);
        beta += ell[target] - lse;
        h.clone_from(&cell.h);
        c.clone_from(&cell.c);
        if keep {
            let scores = (mode == OutputMode::NormalizedSigmoid).then(|| {
                let mut a = vec![0.0; params.dims.vocab_size];
                params.word_out_emb.gemv_acc(&u, &mut a);
                a
            });
            ell.iter_mut().for_each(|v| *v -= lse);
            records.push(StepRecord {
                cell,
                prev,
                target,
                u,
                log_probs: ell,
                scores,
            });
        }
        prev = target;
    }
    (beta, records, term)
}

/// β = log P(sentence | topic) including the EOS term; h₀ = 0, y₀ = BOS.
pub fn sentence_log_prob(sentence: &Sentence, topic: usize, params: &ModelParams, mode: OutputMode) -> Result<f64> {
    params.check_topic(topic)?;
    params.check_sentence(sentence)?;
    Ok(forward(params, sentence, topic, mode, false).0)
}

/// β and ∂β/∂Θ by backpropagation through time.
pub fn sentence_grad(
    sentence: &Sentence,
    topic: usize,
    params: &ModelParams,
    mode: OutputMode,
) -> Result<(f64, ParamGrads)> {
    let mut grads = ParamGrads::zeros(params.dims);
    let beta = accumulate_sentence_grad(sentence, topic, params, mode, 1.0, &mut grads)?;
    Ok((beta, grads))
}

/// Adds `weight · ∂β/∂Θ` into `grads` and returns β.
pub fn accumulate_sentence_grad(
    sentence: &Sentence,
    topic: usize,
    params: &ModelParams,
    mode: OutputMode,
    weight: f64,
    grads: &mut ParamGrads,
) -> Result<f64> {
    params.check_topic(topic)?;
    params.check_sentence(sentence)?;
    if grads.dims != params.dims {
        return Err(Error::ShapeMismatch(
            "gradient buffer dimensions differ from params".into(),
        ));
    }
    let (beta, records, _) = forward(params, sentence, topic, mode, true);
    let d = params.dims;
    let d_h = d.d_h;
    let g = &mut grads.0;

    let mut dh_next = vec![0.0; d_h];
    let mut dc_next = vec![0.0; d_h];
    // ∂/∂(W₃k + b), summed over steps
    let mut d_term = vec![0.0; d.d_s];
    let mut da = vec![0.0; d.vocab_size];
    let mut du = vec![0.0; d.d_s];
    let mut dz = vec![0.0; 4 * d_h];
    let mut dx = vec![0.0; d.input_size()];

    for rec in records.iter().rev() {
        // dβ/dℓ_v = δ(v, target) − p_v, scaled by dℓ/da in sigmoid mode
        for (v, (dav, lp)) in da.iter_mut().zip(&rec.log_probs).enumerate() {
            let ind = if v == rec.target { 1.0 } else { 0.0 };
            *dav = weight * (ind - lp.exp());
        }
        if let Some(scores) = &rec.scores {
            for (dav, &a) in da.iter_mut().zip(scores) {
                *dav *= sigmoid(-a);
            }
        }
        g.word_out_emb.add_outer(&da, &rec.u);
        du.fill(0.0);
        params.word_out_emb.gemv_t_acc(&da, &mut du);

        let y = params.word_in_emb.row(rec.prev);
        g.proj_h.add_outer(&du, &rec.cell.h);
        g.proj_y.add_outer(&du, y);
        params.proj_y.gemv_t_acc(&du, g.word_in_emb.row_mut(rec.prev));
        axpy(1.0, &du, &mut d_term);

        let mut dh = std::mem::take(&mut dh_next);
        params.proj_h.gemv_t_acc(&du, &mut dh);

        let gates = &rec.cell.gates;
        let mut dc_prev = vec![0.0; d_h];
        for j in 0..d_h {
            let (i, f, gg, o) = (gates[j], gates[d_h + j], gates[2 * d_h + j], gates[3 * d_h + j]);
            let tc = rec.cell.tanh_c[j];
            let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
            let d_o = dh[j] * tc;
            let d_i = dc * gg;
            let d_g = dc * i;
            let d_f = dc * rec.cell.c_prev[j];
            dz[j] = d_i * i * (1.0 - i);
            dz[d_h + j] = d_f * f * (1.0 - f);
            dz[2 * d_h + j] = d_g * (1.0 - gg * gg);
            dz[3 * d_h + j] = d_o * o * (1.0 - o);
            dc_prev[j] = dc * f;
        }
        g.lstm_wx.add_outer(&dz, &rec.cell.x);
        g.lstm_wh.add_outer(&dz, &rec.cell.h_prev);
        axpy(1.0, &dz, g.lstm_bias.as_mut_slice());

        dx.fill(0.0);
        params.lstm_wx.gemv_t_acc(&dz, &mut dx);
        axpy(1.0, &dx[..d.d_w], g.word_in_emb.row_mut(rec.prev));
        axpy(1.0, &dx[d.d_w..], g.topic_emb.row_mut(topic));

        dh_next = vec![0.0; d_h];
        params.lstm_wh.gemv_t_acc(&dz, &mut dh_next);
        dc_next = dc_prev;
    }

    axpy(1.0, &d_term, g.bias.as_mut_slice());
    g.proj_k.add_outer(&d_term, params.topic_emb.row(topic));
    params.proj_k.gemv_t_acc(&d_term, g.topic_emb.row_mut(topic));
    Ok(beta)
}
