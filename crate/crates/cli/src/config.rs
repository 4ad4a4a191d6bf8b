//! Run configuration: one TOML file covering every subcommand. Values come
//! from the library defaults, then the `--config` file, then explicit flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slrtm::corpus::{CorpusLayout, TokenizeOptions, DEFAULT_MIN_COUNT};
use slrtm::evaluation::{ClassifierOptions, PerplexityOptions};
use slrtm::generation::GenConfig;
use slrtm::inference::TrainConfig;
use slrtm::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub data: DataOptions,
    pub train: TrainConfig,
    pub perplexity: PerplexityOptions,
    pub classifier: ClassifierOptions,
    pub generate: GenConfig,
    pub decode: DecodeOptions,
    pub topwords: TopWordsOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    pub layout: CorpusLayout,
    pub min_count: u64,
    pub keep_punctuation: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            layout: CorpusLayout::Auto,
            min_count: DEFAULT_MIN_COUNT,
            keep_punctuation: true,
        }
    }
}

impl DataOptions {
    pub fn tokenize(&self) -> TokenizeOptions {
        TokenizeOptions {
            keep_punctuation: self.keep_punctuation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    #[default]
    Beam,
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    /// Sentences per topic (samples, or the best `count` beam hypotheses).
    pub count: usize,
    /// Topics to generate for; empty means all.
    pub topics: Vec<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam,
            count: 1,
            topics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopWordsOptions {
    pub n: usize,
}

impl Default for TopWordsOptions {
    fn default() -> Self {
        Self { n: 10 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generate.validate()?;
        if self.perplexity.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let c = &self.classifier;
        if !(0.0..1.0).contains(&c.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                c.validation_fraction
            )));
        }
        if c.reg_strengths.is_empty() || c.reg_strengths.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("reg_strengths must be nonempty and nonnegative".into()));
        }
        if c.epochs == 0 {
            return Err(Error::Config("classifier epochs must be at least 1".into()));
        }
        if self.decode.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.topwords.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        Ok(())
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field.as_deref().ok_or_else(|| {
            Error::Config(format!(
                "{name} is not set (flag --{} or config key {name})",
                name.replace('_', "-")
            ))
        })
    }
}
