//! Raw text to encoded documents: sentence splitting, tokenization,
//! vocabulary construction and label loading.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

pub const DEFAULT_MIN_COUNT: u64 = 5;

/// Token ↔ id map. Ids 0, 1, 2 are BOS, EOS and UNK; regular tokens
/// follow in descending count order, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const UNK: usize = 2;

    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_sorted(Vec::new())
    }

    fn from_sorted(entries: Vec<(String, u64)>) -> Self {
        let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut counts = vec![0, 0, 0];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, id_of, counts }
    }

    /// Keeps tokens seen at least `min_count` times.
    pub fn from_counts(counts: HashMap<String, u64>, min_count: u64) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !is_reserved(t))
            .collect();
        entries.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        Ok(Self::from_sorted(entries))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos_id(&self) -> usize {
        Self::BOS
    }

    pub fn eos_id(&self) -> usize {
        Self::EOS
    }

    pub fn unk_id(&self) -> usize {
        Self::UNK
    }

    pub fn is_reserved_id(&self, id: usize) -> bool {
        id <= Self::UNK
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    /// Id of `token`, or UNK when out of vocabulary.
    pub fn encode_token(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    /// `token<TAB>count` per line, reserved tokens first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: &str| Error::Parse {
            path: "<vocabulary>".into(),
            message: format!("line {line}: {msg}"),
        };
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, count) = line.split_once('\t').ok_or_else(|| parse_err(i + 1, "missing tab"))?;
            let count = count.parse::<u64>().map_err(|_| parse_err(i + 1, "bad count"))?;
            tokens.push(tok.to_string());
            counts.push(count);
        }
        if tokens.len() < 3 || tokens[0] != BOS_TOKEN || tokens[1] != EOS_TOKEN || tokens[2] != UNK_TOKEN {
            return Err(parse_err(1, "reserved tokens must come first"));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i).is_some() {
                return Err(parse_err(i + 1, &format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, id_of, counts })
    }

    /// Hex SHA-256 of the TSV serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }
}

fn is_reserved(token: &str) -> bool {
    token == BOS_TOKEN || token == EOS_TOKEN || token == UNK_TOKEN
}

/// Encoded sentence: word ids followed by exactly one EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    token_ids: Vec<usize>,
}

impl Sentence {
    pub fn new(token_ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        match token_ids.last() {
            None => return Err(Error::InvalidSentence("empty".into())),
            Some(&last) if last != Vocabulary::EOS => return Err(Error::InvalidSentence("must end with EOS".into())),
            _ => {}
        }
        if token_ids[..token_ids.len() - 1].contains(&Vocabulary::EOS) {
            return Err(Error::InvalidSentence("EOS before the end".into()));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::InvalidSentence(format!(
                "id {bad} >= vocabulary size {vocab_size}"
            )));
        }
        Ok(Self { token_ids })
    }

    /// Word ids followed by EOS.
    pub fn from_words(words: &[usize], vocab_size: usize) -> Result<Self> {
        let mut ids = words.to_vec();
        ids.push(Vocabulary::EOS);
        Self::new(ids, vocab_size)
    }

    /// All ids including the final EOS.
    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    /// Ids without the final EOS.
    pub fn words(&self) -> &[usize] {
        &self.token_ids[..self.token_ids.len() - 1]
    }

    /// Number of predicted tokens (words plus EOS).
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
    pub labels: Option<Vec<usize>>,
}

impl Document {
    pub fn word_count(&self) -> usize {
        self.sentences.iter().map(|s| s.words().len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocabulary: Vocabulary,
    pub label_names: Option<Vec<String>>,
}

impl Corpus {
    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    /// Attaches labels by doc id; documents absent from the table get none.
    /// Label names are sorted for a stable id order.
    pub fn attach_labels(&mut self, table: &[(String, Vec<String>)]) {
        let names: BTreeSet<&str> = table.iter().flat_map(|(_, ls)| ls.iter().map(String::as_str)).collect();
        let names: Vec<String> = names.into_iter().map(str::to_string).collect();
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let by_doc: HashMap<&str, &Vec<String>> = table.iter().map(|(d, ls)| (d.as_str(), ls)).collect();
        for doc in &mut self.documents {
            doc.labels = by_doc.get(doc.doc_id.as_str()).map(|ls| {
                let mut ids: Vec<usize> = ls.iter().map(|l| index[l.as_str()]).collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            });
        }
        self.label_names = Some(names);
    }
}

/// A document before encoding: its sentences as raw strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub sentences: Vec<String>,
}

impl RawDocument {
    /// Splits free text into sentences.
    pub fn from_text(doc_id: impl Into<String>, text: &str) -> Self {
        Self {
            doc_id: doc_id.into(),
            sentences: split_sentences(text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizeOptions {
    pub keep_punctuation: bool,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        Self { keep_punctuation: true }
    }
}

/// Splits after '.', '!' or '?' when followed by whitespace and then an
/// uppercase letter, or by the end of the text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            let boundary = j == chars.len() || (j > i + 1 && chars[j].is_uppercase());
            if boundary {
                push_trimmed(&mut out, &chars[start..=i]);
                start = i + 1;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    if start < chars.len() {
        push_trimmed(&mut out, &chars[start..]);
    }
    out
}

fn push_trimmed(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if !s.is_empty() {
        out.push(s);
    }
}

/// Lowercased tokens: alphanumeric runs kept whole, every other
/// non-whitespace character a token of its own (dropped when punctuation
/// is not kept).
pub fn tokenize(sentence: &str, opts: TokenizeOptions) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in sentence.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() && opts.keep_punctuation {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Counts tokens over a stream and applies the `min_count` cutoff.
pub fn build_vocabulary<I, S>(tokens: I, min_count: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in tokens {
        let t = t.as_ref();
        if let Some(c) = counts.get_mut(t) {
            *c += 1;
        } else {
            counts.insert(t.to_string(), 1);
        }
    }
    Vocabulary::from_counts(counts, min_count)
}

/// All tokens of a raw collection, in document order.
pub fn corpus_tokens(raw: &[RawDocument], opts: TokenizeOptions) -> impl Iterator<Item = String> + '_ {
    raw.iter()
        .flat_map(|d| d.sentences.iter())
        .flat_map(move |s| tokenize(s, opts))
}

/// Encodes sentences (OOV → UNK, EOS appended), dropping sentences that
/// tokenize to nothing and documents left without sentences.
pub fn encode_corpus(raw: &[RawDocument], vocabulary: &Vocabulary, opts: TokenizeOptions) -> Corpus {
    let mut documents = Vec::with_capacity(raw.len());
    for doc in raw {
        let sentences: Vec<Sentence> = doc
            .sentences
            .iter()
            .map(|s| tokenize(s, opts))
            .filter(|toks| !toks.is_empty())
            .map(|toks| {
                let mut ids: Vec<usize> = toks.iter().map(|t| vocabulary.encode_token(t)).collect();
                ids.push(Vocabulary::EOS);
                Sentence { token_ids: ids }
            })
            .collect();
        if sentences.is_empty() {
            log::warn!("document {:?} has no sentences after tokenization; dropped", doc.doc_id);
            continue;
        }
        documents.push(Document {
            doc_id: doc.doc_id.clone(),
            sentences,
            labels: None,
        });
    }
    Corpus {
        documents,
        vocabulary: vocabulary.clone(),
        label_names: None,
    }
}

/// Decodes ids back to tokens (EOS included if present).
pub fn decode(ids: &[usize], vocabulary: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|&id| vocabulary.token(id).unwrap_or(UNK_TOKEN).to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusLayout {
    /// Directory → one document per file; file → one document per line.
    #[default]
    Auto,
    Directory,
    LinePerDocument,
    /// Blank-line-separated documents, one sentence per line.
    PreSplit,
}

/// Reads raw documents. In line-per-document files a line of the form
/// `doc_id<TAB>text` names its document; otherwise ids are line indices.
/// Pre-split documents and directory files are identified by block index
/// and file name respectively.
pub fn load_raw_documents(path: &Path, layout: CorpusLayout) -> Result<Vec<RawDocument>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let layout = match layout {
        CorpusLayout::Auto if meta.is_dir() => CorpusLayout::Directory,
        CorpusLayout::Auto => CorpusLayout::LinePerDocument,
        other => other,
    };
    match layout {
        CorpusLayout::Directory => {
            let mut files: Vec<_> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            files
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let id = p
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    Ok(RawDocument::from_text(id, &text))
                })
                .collect()
        }
        CorpusLayout::LinePerDocument => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, line)| match line.split_once('\t') {
                    Some((id, body)) => RawDocument::from_text(id.trim(), body),
                    None => RawDocument::from_text(i.to_string(), line),
                })
                .collect())
        }
        CorpusLayout::PreSplit => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(parse_pre_split(&text))
        }
        CorpusLayout::Auto => unreachable!(),
    }
}

pub fn parse_pre_split(text: &str) -> Vec<RawDocument> {
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let flush = |current: &mut Vec<String>, docs: &mut Vec<RawDocument>| {
        if !current.is_empty() {
            docs.push(RawDocument {
                doc_id: docs.len().to_string(),
                sentences: std::mem::take(current),
            });
        }
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut docs);
        } else {
            current.push(line.trim().to_string());
        }
    }
    flush(&mut current, &mut docs);
    docs
}

/// Pre-split serialization matching [`parse_pre_split`].
pub fn format_pre_split(docs: &[RawDocument]) -> String {
    docs.iter()
        .map(|d| d.sentences.join("\n"))
        .collect::<Vec<_>>()
        .join("\n\n")
        + "\n"
}

/// `doc_id<TAB>label1,label2,...` per line.
pub fn read_labels(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, labels) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: expected doc_id<TAB>labels", i + 1),
        })?;
        let labels: Vec<String> = labels
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        seen.insert(id.trim().to_string(), labels);
    }
    Ok(seen.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, TokenizeOptions::default())
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_sentences("A b. C d!"), vec!["A b.", "C d!"]);
        assert_eq!(split_sentences("no terminator here"), vec!["no terminator here"]);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
        // lowercase after the period is not a boundary
        assert_eq!(split_sentences("e.g. this one. Next?"), vec!["e.g. this one.", "Next?"]);
        assert_eq!(split_sentences("Wow!! Yes"), vec!["Wow!!", "Yes"]);
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks("The chair!"), vec!["the", "chair", "!"]);
        assert_eq!(toks("offers couches"), vec!["offers", "couches"]);
        assert_eq!(toks("2009."), vec!["2009", "."]);
        assert_eq!(
            tokenize(
                "Hello, world.",
                TokenizeOptions {
                    keep_punctuation: false
                }
            ),
            vec!["hello", "world"]
        );
    }

    #[test]
    fn vocabulary_cutoff_and_order() {
        let stream = ["a"; 5].into_iter().chain(["b"]);
        let v = build_vocabulary(stream, 2).unwrap();
        assert_eq!(v.tokens(), &[BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, "a"]);

        let v = build_vocabulary(["x", "y", "x"], 1).unwrap();
        assert_eq!(v.len(), 5);

        let v = build_vocabulary(["b", "a", "b", "a", "a", "b"], 1).unwrap();
        assert!(v.id("a").unwrap() < v.id("b").unwrap());

        let v = build_vocabulary(Vec::<String>::new(), 1).unwrap();
        assert_eq!(v, Vocabulary::reserved_only());
        assert!(build_vocabulary(["a"], 0).is_err());
    }

    #[test]
    fn vocabulary_tsv_round_trip() {
        let v = build_vocabulary(["a", "b", "a", "c"], 1).unwrap();
        let back = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.content_hash(), back.content_hash());
        assert!(Vocabulary::from_tsv("a\t1\n").is_err());
    }

    #[test]
    fn encode_examples() {
        let vocab = build_vocabulary(["a", "b"], 1).unwrap();
        let raw = vec![RawDocument {
            doc_id: "d".into(),
            sentences: vec!["a b".into(), "a zzz".into(), "   ".into()],
        }];
        let c = encode_corpus(&raw, &vocab, TokenizeOptions::default());
        let d = &c.documents[0];
        assert_eq!(d.sentences.len(), 2);
        let (a, b) = (vocab.id("a").unwrap(), vocab.id("b").unwrap());
        assert_eq!(d.sentences[0].token_ids(), &[a, b, Vocabulary::EOS]);
        assert_eq!(d.sentences[1].token_ids(), &[a, Vocabulary::UNK, Vocabulary::EOS]);
    }

    #[test]
    fn empty_documents_dropped() {
        let vocab = build_vocabulary(["a"], 1).unwrap();
        let raw = vec![
            RawDocument {
                doc_id: "0".into(),
                sentences: vec![" ".into()],
            },
            RawDocument {
                doc_id: "1".into(),
                sentences: vec!["a".into()],
            },
        ];
        let c = encode_corpus(&raw, &vocab, TokenizeOptions::default());
        assert_eq!(c.documents.len(), 1);
        assert_eq!(c.documents[0].doc_id, "1");
    }

    #[test]
    fn sentence_validation() {
        assert!(Sentence::new(vec![], 5).is_err());
        assert!(Sentence::new(vec![3, 4], 5).is_err());
        assert!(Sentence::new(vec![3, 1, 4, 1], 5).is_err());
        assert!(Sentence::new(vec![3, 9, 1], 5).is_err());
        let s = Sentence::new(vec![3, 4, 1], 5).unwrap();
        assert_eq!(s.words(), &[3, 4]);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn pre_split_round_trip() {
        let text = "one a.\ntwo b.\n\n\nthree c.\n";
        let docs = parse_pre_split(text);
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].sentences, vec!["one a.", "two b."]);
        assert_eq!(parse_pre_split(&format_pre_split(&docs)), docs);
    }

    #[test]
    fn labels_attach() {
        let vocab = build_vocabulary(["a"], 1).unwrap();
        let raw = vec![
            RawDocument {
                doc_id: "x".into(),
                sentences: vec!["a".into()],
            },
            RawDocument {
                doc_id: "y".into(),
                sentences: vec!["a".into()],
            },
        ];
        let mut c = encode_corpus(&raw, &vocab, TokenizeOptions::default());
        c.attach_labels(&[("x".into(), vec!["music".into(), "art".into()])]);
        assert_eq!(
            c.label_names.as_deref().unwrap(),
            &["art".to_string(), "music".to_string()]
        );
        assert_eq!(c.documents[0].labels, Some(vec![0, 1]));
        assert_eq!(c.documents[1].labels, None);
    }

    proptest! {
        #[test]
        fn decode_yields_known_or_unk(text in "[a-e ,.!]{0,60}") {
            let vocab = build_vocabulary(["a", "b", ",", "a"], 1).unwrap();
            let raw = vec![RawDocument::from_text("d", &text)];
            let c = encode_corpus(&raw, &vocab, TokenizeOptions::default());
            let again = encode_corpus(&raw, &vocab, TokenizeOptions::default());
            prop_assert_eq!(&c, &again);
            for d in &c.documents {
                for s in &d.sentences {
                    for t in decode(s.words(), &vocab) {
                        prop_assert!(vocab.id(&t).is_some());
                    }
                }
            }
        }

        #[test]
        fn vocabulary_ids_are_a_permutation(words in prop::collection::vec("[a-z]{1,4}", 0..40)) {
            let v = build_vocabulary(words.iter(), 1).unwrap();
            for (i, t) in v.tokens().iter().enumerate() {
                prop_assert_eq!(v.id(t), Some(i));
            }
            for w in &words {
                let id = v.id(w).unwrap();
                prop_assert_eq!(v.token(id), Some(w.as_str()));
            }
        }

        #[test]
        fn splitter_covers_all_text(text in "[A-Za-z .!?\n]{0,80}") {
            let joined: String = split_sentences(&text).concat();
            let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(strip(&joined), strip(&text));
        }
    }
}
