//! On-disk checkpoint: `manifest.toml`, `params.bin` (little-endian f32
//! blocks in manifest order) and `vocab.tsv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelDims, ModelParams, OutputMode, BLOCK_NAMES};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub topics: usize,
    pub d_w: usize,
    pub d_k: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub mode: OutputMode,
    pub vocab_size: usize,
    pub vocab_hash: String,
    /// Free-form run metadata (learning rate, epsilon, seed, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub blocks: Vec<BlockSpec>,
}

impl Manifest {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.vocab_size,
            topics: self.topics,
            d_w: self.d_w,
            d_k: self.d_k,
            d_h: self.d_h,
            d_s: self.d_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocabulary: Vocabulary,
    pub mode: OutputMode,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let d = self.params.dims;
        Manifest {
            format_version: FORMAT_VERSION,
            topics: d.topics,
            d_w: d.d_w,
            d_k: d.d_k,
            d_h: d.d_h,
            d_s: d.d_s,
            mode: self.mode,
            vocab_size: d.vocab_size,
            vocab_hash: self.vocabulary.content_hash(),
            metadata: self.metadata.clone(),
            blocks: BLOCK_NAMES
                .iter()
                .zip(self.params.blocks())
                .map(|(name, b)| BlockSpec {
                    name: name.to_string(),
                    rows: b.rows(),
                    cols: b.cols(),
                })
                .collect(),
        }
    }

    pub fn params_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.param_count() * 4);
        for b in self.params.blocks() {
            for &v in b.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.vocabulary.len() != self.params.dims.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens, params expect {}",
                self.vocabulary.len(),
                self.params.dims.vocab_size
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = toml::to_string(&self.manifest()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, self.params_bytes()).map_err(|e| Error::io(&path, e))?;
        self.vocabulary.write(&dir.join(VOCAB_FILE))
    }

    /// Loads and verifies block shapes, byte length and vocabulary hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let vocabulary = Vocabulary::read(&dir.join(VOCAB_FILE))?;
        let found = vocabulary.content_hash();
        if found != manifest.vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: manifest.vocab_hash,
                found,
            });
        }
        if vocabulary.len() != manifest.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens, manifest says {}",
                vocabulary.len(),
                manifest.vocab_size
            )));
        }
        let dims = manifest.dims();
        dims.validate()?;
        let mut params = ModelParams::zeros(dims);
        if manifest.blocks.len() != BLOCK_NAMES.len() {
            return Err(Error::Checkpoint(format!("expected {} blocks", BLOCK_NAMES.len())));
        }
        for ((spec, name), block) in manifest.blocks.iter().zip(BLOCK_NAMES).zip(params.blocks()) {
            if spec.name != name || (spec.rows, spec.cols) != block.shape() {
                return Err(Error::Checkpoint(format!(
                    "block {} is {}x{}, expected {name} {}x{}",
                    spec.name,
                    spec.rows,
                    spec.cols,
                    block.rows(),
                    block.cols()
                )));
            }
        }
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != params.param_count() * 4 {
            return Err(Error::Checkpoint(format!(
                "params.bin holds {} bytes, expected {}",
                bytes.len(),
                params.param_count() * 4
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for block in params.blocks_mut() {
            for v in block.as_mut_slice() {
                *v = values.next().expect("length checked above");
            }
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self {
            params,
            vocabulary,
            mode: manifest.mode,
            metadata: manifest.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::model::ProjectionInit;

    fn sample() -> Checkpoint {
        let vocabulary = build_vocabulary(["a", "b", "a"], 1).unwrap();
        let dims = ModelDims {
            vocab_size: vocabulary.len(),
            topics: 2,
            d_w: 3,
            d_k: 2,
            d_h: 4,
            d_s: 3,
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("learning_rate".into(), "0.05".into());
        Checkpoint {
            params: ModelParams::init(dims, ProjectionInit::Orthogonal, 3).unwrap(),
            vocabulary,
            mode: OutputMode::NormalizedSigmoid,
            metadata,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.mode, ck.mode);
        assert_eq!(back.vocabulary, ck.vocabulary);
        assert_eq!(back.metadata, ck.metadata);
        for (a, b) in back.params.blocks().iter().zip(ck.params.blocks()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // f32 storage is a fixed point
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join(PARAMS_FILE)).unwrap(),
            fs::read(dir2.path().join(PARAMS_FILE)).unwrap()
        );
    }

    #[test]
    fn load_detects_vocabulary_tampering() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let vp = dir.path().join(VOCAB_FILE);
        let text = fs::read_to_string(&vp).unwrap().replace("a\t", "z\t");
        fs::write(&vp, text).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::VocabularyMismatch { .. })
        ));
    }

    #[test]
    fn load_detects_truncated_params() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let pp = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&pp).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&pp, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn load_detects_shape_edit() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap().replace("d_h = 4", "d_h = 5");
        fs::write(&mp, text).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
