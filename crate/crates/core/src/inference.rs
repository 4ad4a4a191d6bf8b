//! Stochastic variational EM.
//!
//! Per sentence minibatch of a document: compute β_lk = log P(s_l | k) for
//! every topic, alternate the φ and γ updates (E-step), then take one
//! Adagrad ascent step along Σ_l Σ_k φ_lk ∂β_lk/∂Θ (M-step). The document's
//! γ is blended with step size ρ_t = (τ₀ + t)^(−κ), where t counts
//! minibatches over the whole run.

mod hogwild;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Sentence};
use crate::error::{Error, Result};
use crate::model::{
    accumulate_sentence_grad, sentence_log_prob, ModelDims, ModelParams, OutputMode, ParamGrads, ProjectionInit,
};
use crate::numerics::{clip_global_norm, digamma_unchecked, ln_gamma, log_sum_exp_unchecked, AdagradState};

/// Pairs with φ below this weight skip their backward pass.
pub const PHI_SKIP_THRESHOLD: f64 = 1e-8;
/// E-step stops early once max_k |Δγ_k| falls below this.
pub const E_STEP_TOLERANCE: f64 = 1e-4;
pub const INFER_MAX_ITERS: usize = 100;
/// Consecutive non-finite minibatches tolerated before training aborts.
pub const MAX_NON_FINITE_STEPS: usize = 10;

/// How the sentence-count scale of the γ candidate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaScale {
    /// n_doc / L: the document's own sentence count.
    #[default]
    PerDocument,
    /// Σ_m N_m / L: the corpus-wide sentence count.
    CorpusTotal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub topics: usize,
    pub d_w: usize,
    pub d_k: usize,
    pub d_h: usize,
    /// Output projection size; 0 means "same as d_w".
    pub d_s: usize,
    pub minibatch: usize,
    pub tau0: f64,
    pub kappa: f64,
    pub e_step_iters: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub clip: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: OutputMode,
    pub threads: usize,
    pub gamma_init: f64,
    pub gamma_scale: GammaScale,
    pub projection_init: ProjectionInit,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            topics: 128,
            d_w: 128,
            d_k: 128,
            d_h: 600,
            d_s: 0,
            minibatch: 5,
            tau0: 1.0,
            kappa: 0.6,
            e_step_iters: 1,
            learning_rate: 0.05,
            adagrad_epsilon: 1e-8,
            clip: 20.0,
            epochs: 6,
            seed: 0,
            mode: OutputMode::SoftmaxLogit,
            threads: 1,
            gamma_init: 0.5,
            gamma_scale: GammaScale::PerDocument,
            projection_init: ProjectionInit::Orthogonal,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.topics == 0 {
            return bad("topics must be at least 1".into());
        }
        if self.d_w == 0 || self.d_k == 0 || self.d_h == 0 {
            return bad("embedding and hidden sizes must be at least 1".into());
        }
        if self.minibatch == 0 {
            return bad("minibatch must be at least 1".into());
        }
        if !(self.tau0 >= 0.0 && self.tau0.is_finite()) {
            return bad(format!("tau0 must be nonnegative, got {}", self.tau0));
        }
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return bad(format!("kappa must lie in (0.5, 1], got {}", self.kappa));
        }
        if self.e_step_iters == 0 {
            return bad("e_step_iters must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.adagrad_epsilon > 0.0) {
            return bad("learning_rate and adagrad_epsilon must be positive".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return bad(format!("gamma_init must be positive, got {}", self.gamma_init));
        }
        Ok(())
    }

    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            topics: self.topics,
            d_w: self.d_w,
            d_k: self.d_k,
            d_h: self.d_h,
            d_s: if self.d_s == 0 { self.d_w } else { self.d_s },
        }
    }
}

/// Variational posterior of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub gamma: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub doc: usize,
    pub rho: f64,
    pub elbo: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// ρ_t = (τ₀ + t)^(−κ). The κ ∈ (0.5, 1] range is enforced by
/// [`TrainConfig::validate`]; here any positive κ is accepted.
pub fn rho(t: u64, tau0: f64, kappa: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("rho needs t >= 1".into()));
    }
    if !(tau0 >= 0.0) || !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Domain(format!(
            "rho needs tau0 >= 0 and kappa > 0, got {tau0}, {kappa}"
        )));
    }
    Ok((tau0 + t as f64).powf(-kappa))
}

/// φ_k ∝ exp(Ψ(γ_k) + β_k), normalized in log space.
pub fn update_phi(beta: &[f64], gamma: &[f64]) -> Vec<f64> {
    debug_assert_eq!(beta.len(), gamma.len());
    let mut logits: Vec<f64> = beta.iter().zip(gamma).map(|(b, &g)| digamma_unchecked(g) + b).collect();
    let lse = log_sum_exp_unchecked(&logits);
    logits.iter_mut().for_each(|x| *x = (*x - lse).exp());
    logits
}

/// γ̃_k = α + (n_doc / L) Σ_l φ_lk.
pub fn gamma_candidate(alpha: f64, phi_batch: &[Vec<f64>], n_doc: f64) -> Vec<f64> {
    let k = phi_batch.first().map_or(0, Vec::len);
    let scale = n_doc / phi_batch.len() as f64;
    let mut sums = vec![0.0; k];
    for row in phi_batch {
        for (s, p) in sums.iter_mut().zip(row) {
            *s += p;
        }
    }
    sums.into_iter().map(|s| alpha + scale * s).collect()
}

/// γ = (1 − ρ) γ_prev + ρ γ̃.
pub fn gamma_blend(gamma_prev: &[f64], gamma_tilde: &[f64], rho: f64) -> Vec<f64> {
    gamma_prev
        .iter()
        .zip(gamma_tilde)
        .map(|(p, t)| (1.0 - rho) * p + rho * t)
        .collect()
}

/// β_lk for every sentence and topic (one forward pass each).
pub fn beta_matrix(sentences: &[&Sentence], params: &ModelParams, mode: OutputMode) -> Result<Vec<Vec<f64>>> {
    sentences
        .iter()
        .map(|s| {
            (0..params.dims.topics)
                .map(|k| sentence_log_prob(s, k, params, mode))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepOutput {
    pub phi: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Alternating φ / γ updates on precomputed β. `gamma_prev` is the
/// blend anchor; φ always sees the latest γ.
pub fn coordinate_ascent(
    beta: &[Vec<f64>],
    gamma_prev: &[f64],
    alpha: f64,
    rho: f64,
    n_doc: f64,
    max_iters: usize,
) -> (Vec<Vec<f64>>, Vec<f64>, usize) {
    let mut gamma = gamma_prev.to_vec();
    let mut phi = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        phi = beta.iter().map(|b| update_phi(b, &gamma)).collect();
        let next = gamma_blend(gamma_prev, &gamma_candidate(alpha, &phi, n_doc), rho);
        let delta = next.iter().zip(&gamma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        gamma = next;
        if delta < E_STEP_TOLERANCE {
            break;
        }
    }
    (phi, gamma, iterations)
}

/// E-step for one minibatch of a document with `n_doc` sentences (or the
/// corpus-wide count, depending on [`GammaScale`]).
pub fn e_step(
    batch: &[&Sentence],
    gamma_prev: &[f64],
    params: &ModelParams,
    config: &TrainConfig,
    rho: f64,
    n_doc: usize,
) -> Result<EStepOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("e_step batch"));
    }
    if gamma_prev.len() != params.dims.topics {
        return Err(Error::ShapeMismatch(format!(
            "gamma has {} entries, model has {} topics",
            gamma_prev.len(),
            params.dims.topics
        )));
    }
    let beta = beta_matrix(batch, params, config.mode)?;
    let (phi, gamma, iterations) =
        coordinate_ascent(&beta, gamma_prev, config.alpha, rho, n_doc as f64, config.e_step_iters);
    Ok(EStepOutput {
        phi,
        gamma,
        beta,
        iterations,
    })
}

/// Mean-field lower bound of one document:
/// Σ_l Σ_k φ_lk (β_lk + E[log θ_k] − log φ_lk) + E_q[log p(θ|α) − log q(θ|γ)].
pub fn elbo(phi: &[Vec<f64>], gamma: &[f64], beta: &[Vec<f64>], alpha: f64) -> f64 {
    let k = gamma.len() as f64;
    let sum_gamma: f64 = gamma.iter().sum();
    let psi_sum = digamma_unchecked(sum_gamma);
    let e_log_theta: Vec<f64> = gamma.iter().map(|&g| digamma_unchecked(g) - psi_sum).collect();
    let mut total = 0.0;
    for (phi_l, beta_l) in phi.iter().zip(beta) {
        for ((&p, &b), &e) in phi_l.iter().zip(beta_l).zip(&e_log_theta) {
            if p > 0.0 {
                total += p * (b + e - p.ln());
            }
        }
    }
    total += ln_gamma(k * alpha) - k * ln_gamma(alpha) - ln_gamma(sum_gamma);
    for (&g, &e) in gamma.iter().zip(&e_log_theta) {
        total += ln_gamma(g) + (alpha - g) * e;
    }
    total
}

/// Σ_l Σ_k φ_lk ∂β_lk/∂Θ, skipping pairs with φ_lk below
/// [`PHI_SKIP_THRESHOLD`].
pub fn weighted_gradient(
    batch: &[&Sentence],
    phi: &[Vec<f64>],
    params: &ModelParams,
    mode: OutputMode,
) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros(params.dims);
    accumulate_weighted_gradient(batch, phi, params, mode, &mut grads)?;
    Ok(grads)
}

fn accumulate_weighted_gradient(
    batch: &[&Sentence],
    phi: &[Vec<f64>],
    params: &ModelParams,
    mode: OutputMode,
    grads: &mut ParamGrads,
) -> Result<()> {
    if batch.len() != phi.len() {
        return Err(Error::ShapeMismatch("one phi row per sentence".into()));
    }
    for (s, phi_l) in batch.iter().zip(phi) {
        for (k, &w) in phi_l.iter().enumerate() {
            if w >= PHI_SKIP_THRESHOLD {
                accumulate_sentence_grad(s, k, params, mode, w, grads)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepOutcome {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Weighted gradient, global-norm clip, one Adagrad ascent step. A
/// non-finite gradient leaves the parameters untouched and is reported as
/// [`Error::NonFinite`].
pub fn m_step(
    batch: &[&Sentence],
    phi: &[Vec<f64>],
    params: &mut ModelParams,
    adagrad: &mut AdagradState,
    config: &TrainConfig,
) -> Result<MStepOutcome> {
    let mut grads = weighted_gradient(batch, phi, params, config.mode)?;
    apply_gradient(params, &mut grads, adagrad, config.clip)
}

fn apply_gradient(
    params: &mut ModelParams,
    grads: &mut ParamGrads,
    adagrad: &mut AdagradState,
    clip: f64,
) -> Result<MStepOutcome> {
    let grad_norm = {
        let mut blocks: Vec<&mut [f64]> = grads.blocks_mut().into_iter().map(|b| b.as_mut_slice()).collect();
        clip_global_norm(&mut blocks, clip)?
    };
    let g: Vec<&[f64]> = grads.blocks().into_iter().map(|b| b.as_slice()).collect();
    let mut p: Vec<&mut [f64]> = params.blocks_mut().into_iter().map(|b| b.as_mut_slice()).collect();
    adagrad.ascend(&mut p, &g)?;
    Ok(MStepOutcome { grad_norm })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Final γ per document, in corpus order.
    pub gammas: Vec<Vec<f64>>,
    pub log: TrainLog,
}

/// Minibatches of at most `size` consecutive sentences.
pub fn minibatches(doc: &Document, size: usize) -> impl Iterator<Item = Vec<&Sentence>> {
    doc.sentences.chunks(size).map(|c| c.iter().collect())
}

/// Full training run. Single-threaded runs are a deterministic function
/// of (corpus, config); `threads > 1` selects the lock-free asynchronous
/// mode, which is not.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutput> {
    train_with_progress(corpus, config, |_| {})
}

pub fn train_with_progress(
    corpus: &Corpus,
    config: &TrainConfig,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    if corpus.documents.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    let dims = config.dims(corpus.vocabulary.len());
    let params = ModelParams::init(dims, config.projection_init, config.seed)?;
    if config.threads > 1 {
        return hogwild::train_async(corpus, config, params);
    }

    let mut params = params;
    let mut adagrad = AdagradState::new(params.block_sizes(), config.learning_rate, config.adagrad_epsilon)?;
    let mut gammas = vec![vec![config.gamma_init; config.topics]; corpus.documents.len()];
    let mut log = TrainLog::default();
    let mut grads = ParamGrads::zeros(dims);
    let total_sentences = corpus.sentence_count();
    let mut order: Vec<usize> = (0..corpus.documents.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let started = Instant::now();
    let mut t: u64 = 0;
    let mut bad_streak = 0;

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut order_rng);
        }
        for &d in &order {
            let doc = &corpus.documents[d];
            let n_scale = match config.gamma_scale {
                GammaScale::PerDocument => doc.sentences.len(),
                GammaScale::CorpusTotal => total_sentences,
            };
            for batch in minibatches(doc, config.minibatch) {
                t += 1;
                let rho_t = rho(t, config.tau0, config.kappa)?;
                let es = e_step(&batch, &gammas[d], &params, config, rho_t, n_scale)?;
                let batch_elbo = elbo(&es.phi, &es.gamma, &es.beta, config.alpha);
                grads.clear();
                accumulate_weighted_gradient(&batch, &es.phi, &params, config.mode, &mut grads)?;
                let outcome = if batch_elbo.is_finite() {
                    apply_gradient(&mut params, &mut grads, &mut adagrad, config.clip)
                } else {
                    Err(Error::NonFinite("bound".into()))
                };
                let (grad_norm, skipped) = match outcome {
                    Ok(o) => (o.grad_norm, false),
                    Err(Error::NonFinite(_)) => (f64::NAN, true),
                    Err(e) => return Err(e),
                };
                if skipped {
                    bad_streak += 1;
                    log::warn!("step {t}: non-finite gradient or bound, update skipped");
                    if bad_streak > MAX_NON_FINITE_STEPS {
                        return Err(Error::NonFinite(format!(
                            "training objective for more than {MAX_NON_FINITE_STEPS} consecutive steps (last step {t})"
                        )));
                    }
                } else {
                    bad_streak = 0;
                    gammas[d] = es.gamma;
                }
                let record = TrainRecord {
                    step: t,
                    epoch,
                    doc: d,
                    rho: rho_t,
                    elbo: batch_elbo,
                    grad_norm,
                    skipped,
                    wall_time_s: started.elapsed().as_secs_f64(),
                };
                progress(&record);
                log.records.push(record);
            }
        }
    }
    Ok(TrainOutput { params, gammas, log })
}

/// Held-out posterior with frozen parameters: full-batch coordinate
/// ascent (ρ = 1) from γ = α + n_doc/K.
pub fn infer_document(document: &Document, params: &ModelParams, config: &TrainConfig) -> Result<VariationalState> {
    Ok(infer_document_with_beta(document, params, config)?.0)
}

/// As [`infer_document`], also returning the β matrix it used.
pub fn infer_document_with_beta(
    document: &Document,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<(VariationalState, Vec<Vec<f64>>)> {
    let sentences: Vec<&Sentence> = document.sentences.iter().collect();
    if sentences.is_empty() {
        return Err(Error::EmptyInput("document"));
    }
    let beta = beta_matrix(&sentences, params, config.mode)?;
    let state = infer_from_beta(&beta, config.alpha, INFER_MAX_ITERS);
    Ok((state, beta))
}

pub fn infer_from_beta(beta: &[Vec<f64>], alpha: f64, max_iters: usize) -> VariationalState {
    let k = beta[0].len();
    let n = beta.len() as f64;
    let start = vec![alpha + n / k as f64; k];
    let (phi, gamma, _) = coordinate_ascent(beta, &start, alpha, 1.0, n, max_iters);
    VariationalState { gamma, phi }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho(1, 0.0, 1.0).unwrap(), 1.0);
        assert!(close(rho(3, 1.0, 0.5).unwrap(), 0.5, 1e-15));
        let mut prev = f64::INFINITY;
        for t in 1..200 {
            let r = rho(t, 1.0, 0.6).unwrap();
            assert!(r < prev && r > 0.0 && r <= 1.0);
            prev = r;
        }
        assert!(rho(1, 0.0, 0.0).is_err());
        assert!(rho(1, -1.0, 0.7).is_err());
        assert!(rho(0, 0.0, 0.7).is_err());
    }

    #[test]
    fn phi_examples() {
        let phi = update_phi(&[-3.0, -3.0, -3.0], &[1.0, 1.0, 1.0]);
        assert!(phi.iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));
        let phi = update_phi(&[0.0, 3f64.ln()], &[2.0, 2.0]);
        assert!(close(phi[0], 0.25, 1e-15) && close(phi[1], 0.75, 1e-15));
        let a = update_phi(&[-10.0, -12.0, -9.5], &[0.7, 2.0, 1.1]);
        let b = update_phi(&[-1010.0, -1012.0, -1009.5], &[0.7, 2.0, 1.1]);
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn gamma_candidate_examples() {
        let phi = vec![vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]];
        let g = gamma_candidate(0.5, &phi, 3.0);
        assert!(close(g[0], 1.8, 1e-15) && close(g[1], 2.2, 1e-15));
        let g = gamma_candidate(0.5, &[vec![1.0, 0.0, 0.0]], 4.0);
        assert_eq!(g, vec![4.5, 0.5, 0.5]);
        assert!(close(g.iter().sum::<f64>(), 3.0 * 0.5 + 4.0, 1e-12));
    }

    #[test]
    fn gamma_blend_examples() {
        let prev = [1.0, 4.0];
        let tilde = [3.0, 2.0];
        assert_eq!(gamma_blend(&prev, &tilde, 1.0), tilde.to_vec());
        assert_eq!(gamma_blend(&prev, &tilde, 0.0), prev.to_vec());
        let g = gamma_blend(&prev, &tilde, 0.3);
        assert!(g[0] > 1.0 && g[0] < 3.0 && g[1] > 2.0 && g[1] < 4.0);
    }

    #[test]
    fn elbo_degenerate_single_topic() {
        let beta = vec![vec![-3.5], vec![-7.25]];
        let phi = vec![vec![1.0], vec![1.0]];
        let e = elbo(&phi, &[0.5], &beta, 0.5);
        assert!(close(e, -10.75, 1e-12), "{e}");
    }

    #[test]
    fn elbo_one_hot_substitution() {
        let beta = vec![vec![-4.0, -2.0, -6.0]];
        let phi = vec![vec![0.0, 1.0, 0.0]];
        let alpha = 0.5;
        let gamma = [alpha; 3];
        let psi = digamma_unchecked;
        let want = -2.0 + psi(alpha) - psi(3.0 * alpha);
        assert!(close(elbo(&phi, &gamma, &beta, alpha), want, 1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                kappa: 0.5,
                ..Default::default()
            },
            TrainConfig {
                kappa: 1.01,
                ..Default::default()
            },
            TrainConfig {
                minibatch: 0,
                ..Default::default()
            },
            TrainConfig {
                alpha: 0.0,
                ..Default::default()
            },
            TrainConfig {
                topics: 0,
                ..Default::default()
            },
            TrainConfig {
                clip: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn coordinate_ascent_single_topic() {
        let beta = vec![vec![-3.0], vec![-1.0], vec![-2.0]];
        let (phi, gamma, _) = coordinate_ascent(&beta, &[0.5], 0.5, 1.0, 3.0, 1);
        assert!(phi.iter().all(|p| p == &vec![1.0]));
        assert_eq!(gamma, vec![3.5]);
    }
}
