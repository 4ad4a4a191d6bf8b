use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use slrtm::corpus::{
    build_vocabulary, corpus_tokens, encode_corpus, load_raw_documents, read_labels, Corpus, Vocabulary,
};
use slrtm::evaluation::{doc_vectors, evaluate_classifier, format_vectors_tsv, perplexity, train_classifier};
use slrtm::generation::{
    beam_search, format_hypothesis, format_top_words, greedy_decode, sample_sentences, top_words, Hypothesis,
};
use slrtm::inference::{train_with_progress, TrainRecord};
use slrtm::model::checkpoint::Checkpoint;
use slrtm::{Error, Result};

use crate::args::Explicit;
use crate::config::{DecodeMode, RunConfig, CONFIG_FILE};

pub const GAMMAS_FILE: &str = "gammas.tsv";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PERPLEXITY_FILE: &str = "perplexity.json";
pub const DOCVEC_FILE: &str = "docvec.tsv";
pub const METRICS_FILE: &str = "metrics.json";
pub const GENERATED_FILE: &str = "generated.tsv";
pub const TOPWORDS_FILE: &str = "topwords.tsv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Creates the output directory and echoes the effective config into it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = RunConfig::require(&cfg.out, "out")?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(out)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn name<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn load_corpus(cfg: &RunConfig, path: &Path, vocabulary: &Vocabulary) -> Result<Corpus> {
    let raw = load_raw_documents(path, cfg.data.layout)?;
    let corpus = encode_corpus(&raw, vocabulary, cfg.data.tokenize());
    if corpus.documents.is_empty() {
        return Err(Error::EmptyInput("corpus has no documents with sentences"));
    }
    Ok(corpus)
}

/// Training settings stored with the checkpoint.
fn metadata(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    if let Ok(toml::Value::Table(table)) = toml::Value::try_from(&cfg.train) {
        for (k, v) in table {
            let v = match v {
                toml::Value::String(s) => s,
                other => other.to_string(),
            };
            map.insert(k, v);
        }
    }
    map.insert("min_count".into(), cfg.data.min_count.to_string());
    map.insert("keep_punctuation".into(), cfg.data.keep_punctuation.to_string());
    map
}

/// Loads the checkpoint and adopts its sizes, output mode and, unless
/// overridden on the command line, its alpha and punctuation setting.
fn load_model(cfg: &mut RunConfig, explicit: Explicit) -> Result<Checkpoint> {
    let dir = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(dir).map_err(|e| match e {
        Error::Parse { path, message } => Error::Checkpoint(format!("{}: {message}", path.display())),
        other => other,
    })?;
    let d = ck.params.dims;
    let t = &mut cfg.train;
    (t.topics, t.d_w, t.d_k, t.d_h, t.d_s, t.mode) = (d.topics, d.d_w, d.d_k, d.d_h, d.d_s, ck.mode);
    if !explicit.alpha {
        if let Some(a) = ck.metadata.get("alpha") {
            t.alpha = a
                .parse()
                .map_err(|_| Error::Checkpoint(format!("unreadable alpha {a:?} in manifest")))?;
        }
    }
    if !explicit.punctuation {
        if let Some(p) = ck.metadata.get("keep_punctuation") {
            cfg.data.keep_punctuation = p != "false";
        }
    }
    cfg.validate()?;
    Ok(ck)
}

struct EpochReport {
    epoch: Option<usize>,
    steps: usize,
    elbo: f64,
    skipped: usize,
}

impl EpochReport {
    fn record(&mut self, r: &TrainRecord) {
        if self.epoch != Some(r.epoch) {
            self.flush();
            self.epoch = Some(r.epoch);
        }
        self.steps += 1;
        if r.skipped {
            self.skipped += 1;
        } else {
            self.elbo += r.elbo;
        }
    }

    fn flush(&mut self) {
        if let Some(e) = self.epoch {
            let used = (self.steps - self.skipped).max(1);
            eprintln!(
                "epoch {}: {} minibatches, mean bound {:.4}, {} skipped",
                e + 1,
                self.steps,
                self.elbo / used as f64,
                self.skipped
            );
        }
        (self.steps, self.elbo, self.skipped) = (0, 0.0, 0);
    }
}

pub fn train(cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let corpus_path = RunConfig::require(&cfg.corpus, "corpus")?;
    let raw = load_raw_documents(corpus_path, cfg.data.layout)?;
    let vocabulary = build_vocabulary(corpus_tokens(&raw, cfg.data.tokenize()), cfg.data.min_count)?;
    let corpus = encode_corpus(&raw, &vocabulary, cfg.data.tokenize());
    if corpus.documents.is_empty() {
        return Err(Error::EmptyInput("corpus has no documents with sentences"));
    }
    let out = prepare_out(&cfg)?;
    eprintln!(
        "corpus: {} documents, {} sentences, {} vocabulary entries",
        corpus.documents.len(),
        corpus.sentence_count(),
        vocabulary.len()
    );
    let mut report = EpochReport {
        epoch: None,
        steps: 0,
        elbo: 0.0,
        skipped: 0,
    };
    let output = train_with_progress(&corpus, &cfg.train, |r| report.record(r))?;
    report.flush();

    let ck_dir = cfg.checkpoint.clone().unwrap_or_else(|| out.clone());
    Checkpoint {
        params: output.params,
        vocabulary,
        mode: cfg.train.mode,
        metadata: metadata(&cfg),
    }
    .save(&ck_dir)?;
    let ids: Vec<String> = corpus.documents.iter().map(|d| d.doc_id.clone()).collect();
    write(&out.join(GAMMAS_FILE), format_vectors_tsv(&ids, &output.gammas))?;
    write(&out.join(TRAIN_LOG_FILE), output.log.to_jsonl())?;
    println!(
        "trained {} topics on {} documents in {} steps; checkpoint in {}",
        cfg.train.topics,
        corpus.documents.len(),
        output.log.records.len(),
        ck_dir.display()
    );
    Ok(())
}

pub fn perplexity_cmd(mut cfg: RunConfig, explicit: Explicit) -> Result<()> {
    cfg.validate()?;
    let ck = load_model(&mut cfg, explicit)?;
    let corpus = load_corpus(&cfg, RunConfig::require(&cfg.corpus, "corpus")?, &ck.vocabulary)?;
    let out = prepare_out(&cfg)?;
    let report = perplexity(&corpus, &ck.params, &ck.vocabulary, &cfg.train, &cfg.perplexity)?;
    write(
        &out.join(PERPLEXITY_FILE),
        to_json(&json!({ "report": report, "config": cfg })),
    )?;
    println!(
        "perplexity {:.4} ({}) over {} tokens in {} documents",
        report.perplexity,
        name(&report.estimator),
        report.word_count,
        report.documents.len()
    );
    Ok(())
}

pub fn docvec(mut cfg: RunConfig, explicit: Explicit) -> Result<()> {
    cfg.validate()?;
    let ck = load_model(&mut cfg, explicit)?;
    let corpus = load_corpus(&cfg, RunConfig::require(&cfg.corpus, "corpus")?, &ck.vocabulary)?;
    let out = prepare_out(&cfg)?;
    let rows = doc_vectors(&corpus, &ck.params, &cfg.train, cfg.perplexity.threads)?;
    let ids: Vec<String> = corpus.documents.iter().map(|d| d.doc_id.clone()).collect();
    let path = out.join(DOCVEC_FILE);
    write(&path, format_vectors_tsv(&ids, &rows))?;
    println!("wrote {} document vectors to {}", rows.len(), path.display());
    Ok(())
}

type Labeled = (Vec<Vec<f64>>, Vec<Vec<usize>>);

/// Document vectors paired with label ids; unlabeled documents are skipped.
fn labeled(
    corpus: &Corpus,
    rows: Vec<Vec<f64>>,
    table: &[(String, Vec<String>)],
    index: &HashMap<&str, usize>,
) -> Result<Labeled> {
    let by_doc: HashMap<&str, &Vec<String>> = table.iter().map(|(d, ls)| (d.as_str(), ls)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (doc, row) in corpus.documents.iter().zip(rows) {
        if let Some(ls) = by_doc.get(doc.doc_id.as_str()) {
            let mut ids: Vec<usize> = ls.iter().map(|l| index[l.as_str()]).collect();
            ids.sort_unstable();
            ids.dedup();
            xs.push(row);
            ys.push(ids);
        }
    }
    let skipped = corpus.documents.len() - xs.len();
    if skipped > 0 {
        log::warn!("{skipped} documents without labels skipped");
    }
    if xs.is_empty() {
        return Err(Error::EmptyInput("no document has a label"));
    }
    Ok((xs, ys))
}

pub fn classify(mut cfg: RunConfig, explicit: Explicit) -> Result<()> {
    cfg.validate()?;
    let ck = load_model(&mut cfg, explicit)?;
    let train_c = load_corpus(&cfg, RunConfig::require(&cfg.corpus, "corpus")?, &ck.vocabulary)?;
    let test_c = load_corpus(
        &cfg,
        RunConfig::require(&cfg.test_corpus, "test_corpus")?,
        &ck.vocabulary,
    )?;
    let train_table = read_labels(RunConfig::require(&cfg.labels, "labels")?)?;
    let test_table = read_labels(RunConfig::require(&cfg.test_labels, "test_labels")?)?;
    let out = prepare_out(&cfg)?;

    let names: Vec<String> = train_table
        .iter()
        .chain(&test_table)
        .flat_map(|(_, ls)| ls.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let threads = cfg.perplexity.threads;
    let (x, y) = labeled(
        &train_c,
        doc_vectors(&train_c, &ck.params, &cfg.train, threads)?,
        &train_table,
        &index,
    )?;
    let (tx, ty) = labeled(
        &test_c,
        doc_vectors(&test_c, &ck.params, &cfg.train, threads)?,
        &test_table,
        &index,
    )?;
    eprintln!(
        "classifier: {} training and {} test documents, {} labels",
        x.len(),
        tx.len(),
        names.len()
    );
    let model = train_classifier(&x, &y, &names, &cfg.classifier)?;
    let metrics = evaluate_classifier(&model, &tx, &ty)?;
    let report = json!({
        "metrics": metrics,
        "reg_strength": model.reg_strength,
        "label_names": names,
        "train_documents": x.len(),
        "config": cfg,
    });
    write(&out.join(METRICS_FILE), to_json(&report))?;
    println!(
        "accuracy {:.4}, micro-F1 {:.4} on {} test documents",
        metrics.accuracy, metrics.micro_f1, metrics.documents
    );
    Ok(())
}

pub fn generate(mut cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let ck = load_model(&mut cfg, Explicit::default())?;
    let k = ck.params.dims.topics;
    if let Some(&topic) = cfg.decode.topics.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidTopic { topic, topics: k });
    }
    let out = prepare_out(&cfg)?;
    let topics: Vec<usize> = if cfg.decode.topics.is_empty() {
        (0..k).collect()
    } else {
        cfg.decode.topics.clone()
    };
    let (g, count) = (&cfg.generate, cfg.decode.count);
    let mut lines = String::new();
    let mut total = 0;
    for &topic in &topics {
        let hyps: Vec<Hypothesis> = match cfg.decode.mode {
            DecodeMode::Sample => sample_sentences(topic, &ck.params, ck.mode, g, count)?,
            DecodeMode::Beam => beam_search(topic, &ck.params, ck.mode, g)?
                .into_iter()
                .take(count)
                .collect(),
            DecodeMode::Greedy => vec![greedy_decode(topic, &ck.params, ck.mode, g.max_len)?],
        };
        for h in &hyps {
            lines.push_str(&format_hypothesis(topic, h, &ck.vocabulary));
            lines.push('\n');
        }
        total += hyps.len();
    }
    let path = out.join(GENERATED_FILE);
    write(&path, lines)?;
    println!(
        "wrote {total} sentences for {} topics to {}",
        topics.len(),
        path.display()
    );
    Ok(())
}

pub fn topwords(mut cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let ck = load_model(&mut cfg, Explicit::default())?;
    let out = prepare_out(&cfg)?;
    let mut lines = String::new();
    for topic in 0..ck.params.dims.topics {
        let words = top_words(
            topic,
            &ck.params,
            ck.mode,
            &ck.vocabulary,
            cfg.topwords.n,
            &cfg.generate.stoplist,
        )?;
        lines.push_str(&format_top_words(topic, &words, &ck.vocabulary));
    }
    let path = out.join(TOPWORDS_FILE);
    write(&path, lines)?;
    println!(
        "wrote top {} words for {} topics to {}",
        cfg.topwords.n,
        ck.params.dims.topics,
        path.display()
    );
    Ok(())
}
