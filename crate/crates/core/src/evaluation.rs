//! Held-out perplexity, document vectors, and a small logistic-regression
//! classifier for document-vector evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::{elbo, infer_document, infer_document_with_beta, TrainConfig};
use crate::model::ModelParams;
use crate::numerics::{log_sum_exp_unchecked, sigmoid, softmax_in_place, DenseMatrix};

/// log P(d) estimator used for perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodEstimator {
    /// Σ_j log Σ_k θ̂_k exp(β_jk) with θ̂ = γ / Σγ.
    #[default]
    PlugIn,
    /// The document's variational lower bound.
    Elbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerplexityOptions {
    pub estimator: LikelihoodEstimator,
    /// Count EOS tokens in N′ (off: words only).
    pub count_eos: bool,
    pub threads: usize,
}

impl Default for PerplexityOptions {
    fn default() -> Self {
        Self {
            estimator: LikelihoodEstimator::PlugIn,
            count_eos: false,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentLikelihood {
    pub doc_id: String,
    pub log_prob: f64,
    pub elbo: f64,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub estimator: LikelihoodEstimator,
    pub total_log_prob: f64,
    pub word_count: usize,
    pub perplexity: f64,
    /// ELBO-based figures, reported alongside whichever estimator is selected.
    pub total_elbo: f64,
    pub elbo_perplexity: f64,
    pub documents: Vec<DocumentLikelihood>,
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Plug-in log-likelihood of one document from its β matrix and γ.
pub fn plug_in_log_prob(beta: &[Vec<f64>], gamma: &[f64]) -> f64 {
    let total: f64 = gamma.iter().sum();
    let log_theta: Vec<f64> = gamma.iter().map(|g| (g / total).ln()).collect();
    beta.iter()
        .map(|row| {
            let terms: Vec<f64> = row.iter().zip(&log_theta).map(|(b, t)| b + t).collect();
            log_sum_exp_unchecked(&terms)
        })
        .sum()
}

fn document_likelihood(
    doc: &Document,
    params: &ModelParams,
    config: &TrainConfig,
    count_eos: bool,
) -> Result<DocumentLikelihood> {
    let (state, beta) = infer_document_with_beta(doc, params, config)?;
    let word_count = doc.word_count() + if count_eos { doc.sentences.len() } else { 0 };
    Ok(DocumentLikelihood {
        doc_id: doc.doc_id.clone(),
        log_prob: plug_in_log_prob(&beta, &state.gamma),
        elbo: elbo(&state.phi, &state.gamma, &beta, config.alpha),
        word_count,
    })
}

/// perp = exp(−Σ log P(dᵢ) / Σ N′ᵢ) over the test corpus.
pub fn perplexity(
    test_corpus: &Corpus,
    params: &ModelParams,
    vocabulary: &Vocabulary,
    config: &TrainConfig,
    opts: &PerplexityOptions,
) -> Result<PerplexityReport> {
    let expected = vocabulary.content_hash();
    let found = test_corpus.vocabulary.content_hash();
    if expected != found {
        return Err(Error::VocabularyMismatch { expected, found });
    }
    let documents: Vec<DocumentLikelihood> = thread_pool(opts.threads)?.install(|| {
        test_corpus
            .documents
            .par_iter()
            .map(|d| document_likelihood(d, params, config, opts.count_eos))
            .collect::<Result<_>>()
    })?;
    // order-fixed reduction
    let word_count: usize = documents.iter().map(|d| d.word_count).sum();
    let total_plug_in: f64 = documents.iter().map(|d| d.log_prob).sum();
    let total_elbo: f64 = documents.iter().map(|d| d.elbo).sum();
    if word_count == 0 {
        return Err(Error::EmptyInput("test corpus has no countable tokens"));
    }
    let total_log_prob = match opts.estimator {
        LikelihoodEstimator::PlugIn => total_plug_in,
        LikelihoodEstimator::Elbo => total_elbo,
    };
    Ok(PerplexityReport {
        estimator: opts.estimator,
        total_log_prob,
        word_count,
        perplexity: (-total_log_prob / word_count as f64).exp(),
        total_elbo,
        elbo_perplexity: (-total_elbo / word_count as f64).exp(),
        documents,
    })
}

/// Row i is γᵢ / Σ_k γᵢₖ from held-out inference.
pub fn doc_vectors(
    corpus: &Corpus,
    params: &ModelParams,
    config: &TrainConfig,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    thread_pool(threads)?.install(|| {
        corpus
            .documents
            .par_iter()
            .map(|d| {
                let state = infer_document(d, params, config)?;
                let total: f64 = state.gamma.iter().sum();
                Ok(state.gamma.iter().map(|g| g / total).collect())
            })
            .collect()
    })
}

/// `doc_id<TAB>v1<TAB>...` lines.
pub fn format_vectors_tsv(ids: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for (id, row) in ids.iter().zip(rows) {
        out.push_str(id);
        for v in row {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMode {
    /// Softmax regression, exactly one label per document.
    #[default]
    Multiclass,
    /// Independent binary logistic regression per label.
    OneVsRest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierOptions {
    pub mode: ClassifierMode,
    /// L2 strengths tried; the one with the best validation log-likelihood wins.
    pub reg_strengths: Vec<f64>,
    pub validation_fraction: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self {
            mode: ClassifierMode::Multiclass,
            reg_strengths: vec![1e-4, 1e-3, 1e-2, 1e-1],
            validation_fraction: 0.1,
            epochs: 500,
            patience: 50,
            seed: 0,
        }
    }
}

/// Weights are labels × (features + 1); the last column is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub weights: DenseMatrix,
    pub label_names: Vec<String>,
    pub mode: ClassifierMode,
    pub reg_strength: f64,
}

fn with_bias(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(1.0);
    v
}

impl ClassifierModel {
    pub fn scores(&self, features: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.weights.rows()];
        self.weights.gemv_acc(&with_bias(features), &mut s);
        s
    }

    /// Predicted label ids (exactly one in multiclass mode; ties go to the
    /// lower id).
    pub fn predict(&self, features: &[f64]) -> Vec<usize> {
        let s = self.scores(features);
        match self.mode {
            ClassifierMode::Multiclass => {
                let best = s.iter().enumerate().fold(0, |b, (i, &v)| if v > s[b] { i } else { b });
                vec![best]
            }
            ClassifierMode::OneVsRest => (0..s.len()).filter(|&i| sigmoid(s[i]) >= 0.5).collect(),
        }
    }
}

/// Mean log-likelihood minus (λ/2)‖W‖² (bias excluded) and its gradient.
pub fn objective_and_gradient(
    weights: &DenseMatrix,
    features: &[Vec<f64>],
    labels: &[Vec<usize>],
    reg_strength: f64,
    mode: ClassifierMode,
) -> (f64, DenseMatrix) {
    let n = features.len().max(1) as f64;
    let (rows, cols) = weights.shape();
    let mut grad = DenseMatrix::zeros(rows, cols);
    let mut ll = 0.0;
    let mut coeff = vec![0.0; rows];
    for (x, y) in features.iter().zip(labels) {
        let xb = with_bias(x);
        let mut s = vec![0.0; rows];
        weights.gemv_acc(&xb, &mut s);
        match mode {
            ClassifierMode::Multiclass => {
                let lse = log_sum_exp_unchecked(&s);
                ll += s[y[0]] - lse;
                softmax_in_place(&mut s);
                for (c, (co, p)) in coeff.iter_mut().zip(&s).enumerate() {
                    *co = f64::from(u8::from(c == y[0])) - p;
                }
            }
            ClassifierMode::OneVsRest => {
                for (c, (co, &z)) in coeff.iter_mut().zip(&s).enumerate() {
                    let target = f64::from(u8::from(y.contains(&c)));
                    ll += target * crate::numerics::log_sigmoid(z) + (1.0 - target) * crate::numerics::log_sigmoid(-z);
                    *co = target - sigmoid(z);
                }
            }
        }
        grad.add_outer(&coeff, &xb);
    }
    grad.as_mut_slice().iter_mut().for_each(|g| *g /= n);
    let mut objective = ll / n;
    for r in 0..rows {
        for c in 0..cols - 1 {
            let w = weights.get(r, c);
            objective -= 0.5 * reg_strength * w * w;
            grad.set(r, c, grad.get(r, c) - reg_strength * w);
        }
    }
    (objective, grad)
}

fn mean_log_likelihood(
    weights: &DenseMatrix,
    features: &[Vec<f64>],
    labels: &[Vec<usize>],
    mode: ClassifierMode,
) -> f64 {
    objective_and_gradient(weights, features, labels, 0.0, mode).0
}

/// Gradient ascent with early stopping on the validation split; returns
/// the best weights seen and their validation log-likelihood.
fn fit_one(
    features: &[Vec<f64>],
    labels: &[Vec<usize>],
    val_features: &[Vec<f64>],
    val_labels: &[Vec<usize>],
    n_labels: usize,
    reg_strength: f64,
    opts: &ClassifierOptions,
) -> (DenseMatrix, f64) {
    let dim = features[0].len() + 1;
    // step size from a curvature bound of the log-likelihood
    let max_sq = features
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .fold(0.0, f64::max);
    let step = 1.0 / (0.5 * max_sq + reg_strength);
    let mut weights = DenseMatrix::zeros(n_labels, dim);
    let mut best = weights.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0;
    for _ in 0..opts.epochs {
        let (_, grad) = objective_and_gradient(&weights, features, labels, reg_strength, opts.mode);
        crate::numerics::axpy(step, grad.as_slice(), weights.as_mut_slice());
        let val = mean_log_likelihood(&weights, val_features, val_labels, opts.mode);
        if val > best_val {
            best_val = val;
            best.clone_from(&weights);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    (best, best_val)
}

/// Trains on a (1 − validation_fraction) split and picks the L2 strength
/// by validation log-likelihood.
pub fn train_classifier(
    features: &[Vec<f64>],
    labels: &[Vec<usize>],
    label_names: &[String],
    opts: &ClassifierOptions,
) -> Result<ClassifierModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::ShapeMismatch("one label set per feature row".into()));
    }
    let dim = features[0].len();
    if features
        .iter()
        .any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::ShapeMismatch(
            "feature rows must be finite and equal length".into(),
        ));
    }
    if opts.reg_strengths.is_empty() || opts.reg_strengths.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::Config("reg_strengths must be nonempty and nonnegative".into()));
    }
    if !(0.0..1.0).contains(&opts.validation_fraction) {
        return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
    }
    let n_labels = label_names.len();
    if labels.iter().flatten().any(|&l| l >= n_labels) {
        return Err(Error::ShapeMismatch("label id outside label_names".into()));
    }
    match opts.mode {
        ClassifierMode::Multiclass => {
            if labels.iter().any(|l| l.len() != 1) {
                return Err(Error::DegenerateLabels(
                    "multiclass needs exactly one label per document".into(),
                ));
            }
            let mut distinct: Vec<usize> = labels.iter().map(|l| l[0]).collect();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 || n_labels < 2 {
                return Err(Error::DegenerateLabels("multiclass needs at least two classes".into()));
            }
        }
        ClassifierMode::OneVsRest => {
            if n_labels == 0 {
                return Err(Error::DegenerateLabels("no labels".into()));
            }
        }
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_val = (features.len() as f64 * opts.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(features.len() - 1));
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
        (
            idx.iter().map(|&i| features[i].clone()).collect(),
            idx.iter().map(|&i| labels[i].clone()).collect(),
        )
    };
    let (tx, ty) = pick(train_idx);
    let (vx, vy) = if val_idx.is_empty() {
        pick(train_idx)
    } else {
        pick(val_idx)
    };

    let mut best: Option<(DenseMatrix, f64, f64)> = None;
    for &lambda in &opts.reg_strengths {
        let (w, val) = fit_one(&tx, &ty, &vx, &vy, n_labels, lambda, opts);
        if best.as_ref().is_none_or(|(_, b, _)| val > *b) {
            best = Some((w, val, lambda));
        }
    }
    let (weights, _, reg_strength) = best.expect("at least one strength");
    Ok(ClassifierModel {
        weights,
        label_names: label_names.to_vec(),
        mode: opts.mode,
        reg_strength,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub documents: usize,
    /// Fraction of documents whose predicted label set equals the gold set.
    pub accuracy: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
}

/// Micro-averaged F1 from pooled counts, 2TP / (2TP + FP + FN).
pub fn micro_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
}

pub fn metrics_from_predictions(predicted: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<ClassificationMetrics> {
    if predicted.len() != gold.len() {
        return Err(Error::ShapeMismatch("one prediction per gold label set".into()));
    }
    let (mut tp, mut fp, mut fn_, mut exact) = (0, 0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let hits = p.iter().filter(|l| g.contains(l)).count();
        tp += hits;
        fp += p.len() - hits;
        fn_ += g.iter().filter(|l| !p.contains(l)).count();
        let (mut ps, mut gs) = (p.clone(), g.clone());
        ps.sort_unstable();
        gs.sort_unstable();
        exact += usize::from(ps == gs);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ClassificationMetrics {
        documents: gold.len(),
        accuracy: ratio(exact, gold.len()),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        micro_f1: micro_f1(tp, fp, fn_),
    })
}

pub fn evaluate_classifier(
    model: &ClassifierModel,
    features: &[Vec<f64>],
    gold: &[Vec<usize>],
) -> Result<ClassificationMetrics> {
    let predicted: Vec<Vec<usize>> = features.iter().map(|x| model.predict(x)).collect();
    metrics_from_predictions(&predicted, gold)
}
