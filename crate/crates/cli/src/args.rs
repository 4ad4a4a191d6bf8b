//! Command-line flags. Every flag shows the library default; a flag only
//! overrides the config file when it is given on the command line.

use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use slrtm::corpus::{CorpusLayout, DEFAULT_MIN_COUNT};
use slrtm::evaluation::{ClassifierMode, ClassifierOptions, LikelihoodEstimator};
use slrtm::generation::GenConfig;
use slrtm::inference::{GammaScale, TrainConfig};
use slrtm::model::{ModelDims, OutputMode, ProjectionInit};
use slrtm::Result;

use crate::config::{DecodeMode, RunConfig};

/// Parses a kebab-case enum value through its serde representation.
fn kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "slrtm", version, about = "Sentence level recurrent topic model")]
#[command(subcommand_required = true, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint, per-document gammas and a log
    Train(TrainArgs),
    /// Held-out perplexity of a corpus under a checkpoint
    Perplexity(PerplexityArgs),
    /// Normalized topic proportions for each document of a corpus
    Docvec(DocvecArgs),
    /// Train and score a classifier on document vectors
    Classify(ClassifyArgs),
    /// Generate sentences conditioned on topics
    Generate(GenerateArgs),
    /// Most probable sentence-opening words per topic
    Topwords(TopwordsArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML); flags given here take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corpus file or directory
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory (train writes it, by default into the output directory)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed for training, sampling and the classifier split
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (training above 1 is asynchronous and not reproducible)
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct TextArgs {
    /// Corpus layout: auto, directory, line-per-document or pre-split
    #[arg(long, default_value = "auto", value_parser = kebab::<CorpusLayout>)]
    pub layout: CorpusLayout,
    /// Drop punctuation tokens (evaluation follows the checkpoint unless given)
    #[arg(long)]
    pub no_punctuation: bool,
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    /// Dirichlet concentration for inference [default: as recorded in the checkpoint]
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub text: TextArgs,
    /// Drop words seen fewer times than this
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: u64,
    /// Size preset applied before explicit size flags: standard or generation
    #[arg(long, value_parser = ["standard", "generation"])]
    pub preset: Option<String>,
    /// Number of topics K
    #[arg(long, default_value_t = TrainConfig::default().topics)]
    pub topics: usize,
    /// Symmetric Dirichlet concentration
    #[arg(long, default_value_t = TrainConfig::default().alpha)]
    pub alpha: f64,
    /// Word embedding size
    #[arg(long, default_value_t = TrainConfig::default().d_w)]
    pub d_w: usize,
    /// Topic embedding size
    #[arg(long, default_value_t = TrainConfig::default().d_k)]
    pub d_k: usize,
    /// LSTM hidden size
    #[arg(long, default_value_t = TrainConfig::default().d_h)]
    pub d_h: usize,
    /// Output projection size (0: same as d-w)
    #[arg(long, default_value_t = TrainConfig::default().d_s)]
    pub d_s: usize,
    /// Output layer: softmax-logit or normalized-sigmoid
    #[arg(long, default_value = "softmax-logit", value_parser = kebab::<OutputMode>)]
    pub output_mode: OutputMode,
    /// Recurrent weight initialization: orthogonal or uniform
    #[arg(long, default_value = "orthogonal", value_parser = kebab::<ProjectionInit>)]
    pub projection_init: ProjectionInit,
    /// Sentences per minibatch
    #[arg(long, default_value_t = TrainConfig::default().minibatch)]
    pub minibatch: usize,
    /// Passes over the corpus
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    /// Adagrad learning rate
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Adagrad epsilon
    #[arg(long, default_value_t = TrainConfig::default().adagrad_epsilon)]
    pub adagrad_epsilon: f64,
    /// Global gradient norm clip
    #[arg(long, default_value_t = TrainConfig::default().clip)]
    pub clip: f64,
    /// Step-size delay tau0
    #[arg(long, default_value_t = TrainConfig::default().tau0)]
    pub tau0: f64,
    /// Step-size decay kappa, in (0.5, 1]
    #[arg(long, default_value_t = TrainConfig::default().kappa)]
    pub kappa: f64,
    /// Coordinate-ascent sweeps per minibatch
    #[arg(long, default_value_t = TrainConfig::default().e_step_iters)]
    pub e_step_iters: usize,
    /// Initial gamma entries
    #[arg(long, default_value_t = TrainConfig::default().gamma_init)]
    pub gamma_init: f64,
    /// Gamma candidate scale: per-document or corpus-total
    #[arg(long, default_value = "per-document", value_parser = kebab::<GammaScale>)]
    pub gamma_scale: GammaScale,
    /// Keep document order fixed across epochs
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Debug, Args)]
pub struct PerplexityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub text: TextArgs,
    #[command(flatten)]
    pub model: InferenceArgs,
    /// log P(d) estimator: plug-in or elbo
    #[arg(long, default_value = "plug-in", value_parser = kebab::<LikelihoodEstimator>)]
    pub estimator: LikelihoodEstimator,
    /// Count end-of-sentence tokens in the token total
    #[arg(long)]
    pub count_eos: bool,
}

#[derive(Debug, Args)]
pub struct DocvecArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub text: TextArgs,
    #[command(flatten)]
    pub model: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub text: TextArgs,
    #[command(flatten)]
    pub model: InferenceArgs,
    /// Labels of the training corpus: doc_id<TAB>label,label,...
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Corpus the classifier is scored on
    #[arg(long)]
    pub test_corpus: Option<PathBuf>,
    /// Labels of the test corpus
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// multiclass (one label per document) or one-vs-rest
    #[arg(long, default_value = "multiclass", value_parser = kebab::<ClassifierMode>)]
    pub classifier_mode: ClassifierMode,
    /// L2 strengths tried on the validation split
    #[arg(long, value_delimiter = ',', default_values_t = ClassifierOptions::default().reg_strengths)]
    pub reg_strengths: Vec<f64>,
    /// Fraction of training documents held out for choosing the L2 strength
    #[arg(long, default_value_t = ClassifierOptions::default().validation_fraction)]
    pub validation_fraction: f64,
    /// Maximum classifier epochs
    #[arg(long, default_value_t = ClassifierOptions::default().epochs)]
    pub classifier_epochs: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = ClassifierOptions::default().patience)]
    pub patience: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Decoding: beam, sample or greedy
    #[arg(long, default_value = "beam", value_parser = kebab::<DecodeMode>)]
    pub mode: DecodeMode,
    /// Sentences per topic
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Topic to generate for; repeatable [default: all topics]
    #[arg(long = "topic")]
    pub topics: Vec<usize>,
    /// Beam width
    #[arg(long = "beam", default_value_t = GenConfig::default().beam_size)]
    pub beam_size: usize,
    /// Maximum tokens per sentence, end-of-sentence included
    #[arg(long, default_value_t = GenConfig::default().max_len)]
    pub max_len: usize,
    /// Sampling temperature
    #[arg(long, default_value_t = GenConfig::default().temperature)]
    pub temperature: f64,
    /// Redraw unknown-word tokens when sampling
    #[arg(long)]
    pub avoid_unk: bool,
}

#[derive(Debug, Args)]
pub struct TopwordsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Words per topic
    #[arg(short = 'n', long = "top", default_value_t = 10)]
    pub n: usize,
    /// Stoplist file, one word per line [default: built-in list]
    #[arg(long)]
    pub stoplist: Option<PathBuf>,
    /// Rank all words, without a stoplist
    #[arg(long, conflicts_with = "stoplist")]
    pub no_stoplist: bool,
}

/// Overrides settings recorded in a checkpoint only when given explicitly.
#[derive(Debug, Clone, Copy, Default)]
pub struct Explicit {
    pub alpha: bool,
    pub punctuation: bool,
}

fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

macro_rules! apply {
    ($m:expr, $args:expr, $($target:expr => $field:ident),+ $(,)?) => {
        $(if given($m, stringify!($field)) {
            $target = $args.$field.clone();
        })+
    };
}

fn base(common: &CommonArgs, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (target, value) in [
        (&mut cfg.out, &common.out),
        (&mut cfg.corpus, &common.corpus),
        (&mut cfg.checkpoint, &common.checkpoint),
    ] {
        if value.is_some() {
            *target = value.clone();
        }
    }
    if given(m, "seed") {
        cfg.train.seed = common.seed;
        cfg.generate.seed = common.seed;
        cfg.classifier.seed = common.seed;
    }
    if given(m, "threads") {
        cfg.train.threads = common.threads;
        cfg.perplexity.threads = common.threads;
    }
    Ok(cfg)
}

fn apply_text(cfg: &mut RunConfig, text: &TextArgs, m: &ArgMatches) {
    if given(m, "layout") {
        cfg.data.layout = text.layout;
    }
    if text.no_punctuation {
        cfg.data.keep_punctuation = false;
    }
}

fn apply_model(cfg: &mut RunConfig, model: &InferenceArgs) {
    if let Some(alpha) = model.alpha {
        cfg.train.alpha = alpha;
    }
}

fn explicit(text: &TextArgs, model: &InferenceArgs) -> Explicit {
    Explicit {
        alpha: model.alpha.is_some(),
        punctuation: text.no_punctuation,
    }
}

/// The effective configuration of a subcommand, before validation.
pub fn resolve(command: &Command, m: &ArgMatches) -> Result<(RunConfig, Explicit)> {
    match command {
        Command::Train(a) => {
            let mut cfg = base(&a.common, m)?;
            apply_text(&mut cfg, &a.text, m);
            let t = &mut cfg.train;
            if let Some(preset) = &a.preset {
                let dims = match preset.as_str() {
                    "generation" => ModelDims::generation(0, t.topics),
                    _ => ModelDims::standard(0, t.topics),
                };
                (t.d_w, t.d_k, t.d_h, t.d_s) = (dims.d_w, dims.d_k, dims.d_h, dims.d_s);
            }
            apply!(m, a,
                cfg.data.min_count => min_count,
                t.topics => topics, t.alpha => alpha, t.d_w => d_w, t.d_k => d_k, t.d_h => d_h, t.d_s => d_s,
                t.mode => output_mode, t.projection_init => projection_init, t.minibatch => minibatch,
                t.epochs => epochs, t.learning_rate => learning_rate, t.adagrad_epsilon => adagrad_epsilon,
                t.clip => clip, t.tau0 => tau0, t.kappa => kappa, t.e_step_iters => e_step_iters,
                t.gamma_init => gamma_init, t.gamma_scale => gamma_scale,
            );
            if a.no_shuffle {
                t.shuffle = false;
            }
            Ok((cfg, Explicit::default()))
        }
        Command::Perplexity(a) => {
            let mut cfg = base(&a.common, m)?;
            apply_text(&mut cfg, &a.text, m);
            apply_model(&mut cfg, &a.model);
            apply!(m, a, cfg.perplexity.estimator => estimator);
            if a.count_eos {
                cfg.perplexity.count_eos = true;
            }
            Ok((cfg, explicit(&a.text, &a.model)))
        }
        Command::Docvec(a) => {
            let mut cfg = base(&a.common, m)?;
            apply_text(&mut cfg, &a.text, m);
            apply_model(&mut cfg, &a.model);
            Ok((cfg, explicit(&a.text, &a.model)))
        }
        Command::Classify(a) => {
            let mut cfg = base(&a.common, m)?;
            apply_text(&mut cfg, &a.text, m);
            apply_model(&mut cfg, &a.model);
            for (target, value) in [
                (&mut cfg.labels, &a.labels),
                (&mut cfg.test_corpus, &a.test_corpus),
                (&mut cfg.test_labels, &a.test_labels),
            ] {
                if value.is_some() {
                    *target = value.clone();
                }
            }
            let c = &mut cfg.classifier;
            apply!(m, a,
                c.mode => classifier_mode, c.reg_strengths => reg_strengths,
                c.validation_fraction => validation_fraction, c.epochs => classifier_epochs, c.patience => patience,
            );
            Ok((cfg, explicit(&a.text, &a.model)))
        }
        Command::Generate(a) => {
            let mut cfg = base(&a.common, m)?;
            let (d, g) = (&mut cfg.decode, &mut cfg.generate);
            apply!(m, a,
                d.mode => mode, d.count => count, d.topics => topics,
                g.beam_size => beam_size, g.max_len => max_len, g.temperature => temperature,
            );
            if a.avoid_unk {
                g.avoid_unk = true;
            }
            Ok((cfg, Explicit::default()))
        }
        Command::Topwords(a) => {
            let mut cfg = base(&a.common, m)?;
            apply!(m, a, cfg.topwords.n => n);
            if a.no_stoplist {
                cfg.generate.stoplist.clear();
            } else if let Some(path) = &a.stoplist {
                let text = std::fs::read_to_string(path).map_err(|e| slrtm::Error::io(path, e))?;
                cfg.generate.stoplist = text.split_whitespace().map(str::to_string).collect();
            }
            Ok((cfg, Explicit::default()))
        }
    }
}
