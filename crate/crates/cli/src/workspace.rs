//! Run directory layout and artifact loading.
//!
//! ```text
//! <out>/data/manifest.json      split seed and counts
//! <out>/data/train.txt          one caption per line
//! <out>/data/heldout.txt
//! <out>/data/vocab.txt          subword vocabulary
//! <out>/data/heldout/*.png      held-out renders
//! <out>/tokenizer/  model/  reranker/  superres/   checkpoints
//! <out>/samples/                sampled images
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pixseq_core::checkpoint::load_typed;
use pixseq_core::contrastive::{DualEncoder, DualEncoderConfig};
use pixseq_core::image::Image;
use pixseq_core::params::ParamStore;
use pixseq_core::seq2seq::{build_model, pad_text, ModelConfig, Seq2Seq};
use pixseq_core::superres::{SuperRes, SuperResConfig};
use pixseq_core::synth::{canonical_specs, caption, parse_caption, SceneSpec};
use pixseq_core::textproc::{encode_text, SubwordVocab};
use pixseq_core::vq::{Tokenizer, TokenizerConfig};

use crate::error::{CliError, Result};

pub const TOKENIZER_KIND: &str = "tokenizer";
pub const MODEL_KIND: &str = "seq2seq";
pub const RERANKER_KIND: &str = "dual_encoder";
pub const SUPERRES_KIND: &str = "superres";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub seed: u64,
    pub heldout_fraction: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub vocab_size: usize,
}

/// Disjoint train and held-out scene specs.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<SceneSpec>,
    pub heldout: Vec<SceneSpec>,
}

/// Shuffles the canonical scene space with `seed` and holds out the first
/// `round(fraction * n)` specs.
pub fn split_specs(seed: u64, heldout_fraction: f64) -> Split {
    let mut specs = canonical_specs();
    specs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = (heldout_fraction * specs.len() as f64).round() as usize;
    let train = specs.split_off(n_held);
    Split { train, heldout: specs }
}

/// Padded model input ids for a caption.
pub fn text_ids(vocab: &SubwordVocab, text: &str, len: usize) -> Result<Vec<u32>> {
    Ok(pad_text(&encode_text(vocab, text, len)?, len))
}

fn check_params(kind: &str, want: &ParamStore<f32>, got: &ParamStore<f32>) -> Result<()> {
    for (name, t) in want.iter() {
        let g = got.get(name).map_err(|_| CliError::data(format!("{kind} checkpoint lacks `{name}`")))?;
        if g.shape() != t.shape() {
            return Err(CliError::data(format!("{kind} checkpoint `{name}` has shape {:?}, expected {:?}", g.shape(), t.shape())));
        }
    }
    if got.len() != want.len() {
        return Err(CliError::data(format!("{kind} checkpoint has {} tensors, expected {}", got.len(), want.len())));
    }
    Ok(())
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn heldout_images_dir(&self) -> PathBuf {
        self.data_dir().join("heldout")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data_dir().join("vocab.txt")
    }

    pub fn tokenizer_dir(&self) -> PathBuf {
        self.root.join("tokenizer")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn reranker_dir(&self) -> PathBuf {
        self.root.join("reranker")
    }

    pub fn superres_dir(&self) -> PathBuf {
        self.root.join("superres")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::data(format!("{} not found; run `{producer}` first", path.display())))
        }
    }

    pub fn write_split(&self, split: &Split, manifest: &DataManifest, vocab: &SubwordVocab) -> Result<()> {
        let dir = self.data_dir();
        std::fs::create_dir_all(&dir)?;
        let lines = |specs: &[SceneSpec]| specs.iter().map(|s| caption(s) + "\n").collect::<String>();
        std::fs::write(dir.join("train.txt"), lines(&split.train))?;
        std::fs::write(dir.join("heldout.txt"), lines(&split.heldout))?;
        vocab.save(&self.vocab_path())?;
        let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load_split(&self) -> Result<Split> {
        let dir = self.data_dir();
        self.require(&dir.join("train.txt"), "make-data")?;
        let read = |name: &str| -> Result<Vec<SceneSpec>> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path)?;
            text.lines()
                .enumerate()
                .map(|(i, l)| parse_caption(l).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1))))
                .collect()
        };
        Ok(Split { train: read("train.txt")?, heldout: read("heldout.txt")? })
    }

    pub fn load_vocab(&self) -> Result<SubwordVocab> {
        self.require(&self.vocab_path(), "make-data")?;
        Ok(SubwordVocab::load(&self.vocab_path())?)
    }

    pub fn load_tokenizer(&self) -> Result<Tokenizer> {
        self.require(&self.tokenizer_dir(), "train-tokenizer")?;
        let (cfg, params) = load_typed::<TokenizerConfig>(&self.tokenizer_dir(), TOKENIZER_KIND)?;
        check_params(TOKENIZER_KIND, &Tokenizer::new(cfg.clone(), 0)?.params, &params)?;
        Ok(Tokenizer { cfg, params })
    }

    pub fn load_model(&self) -> Result<Seq2Seq> {
        self.require(&self.model_dir(), "train-model")?;
        let (cfg, params) = load_typed::<ModelConfig>(&self.model_dir(), MODEL_KIND)?;
        check_params(MODEL_KIND, &build_model(cfg.clone(), 0)?.params, &params)?;
        Ok(Seq2Seq { cfg, params })
    }

    pub fn load_reranker(&self) -> Result<DualEncoder> {
        self.require(&self.reranker_dir(), "train-reranker")?;
        let (cfg, params) = load_typed::<DualEncoderConfig>(&self.reranker_dir(), RERANKER_KIND)?;
        check_params(RERANKER_KIND, &DualEncoder::new(cfg.clone(), 0)?.params, &params)?;
        Ok(DualEncoder { cfg, params })
    }

    pub fn load_superres(&self) -> Result<SuperRes> {
        self.require(&self.superres_dir(), "train-sr")?;
        let (cfg, params) = load_typed::<SuperResConfig>(&self.superres_dir(), SUPERRES_KIND)?;
        check_params(SUPERRES_KIND, &SuperRes::new(cfg.clone(), 0).params, &params)?;
        Ok(SuperRes { cfg, params })
    }
}

/// PNG files of a directory in name order.
pub fn load_png_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::data(format!("{} holds no PNG files", dir.display())));
    }
    names
        .into_iter()
        .map(|p| {
            let img = Image::load_png(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let s = split_specs(3, 0.15);
        assert_eq!(s, split_specs(3, 0.15));
        assert_eq!(s.train.len() + s.heldout.len(), canonical_specs().len());
        assert!(s.heldout.len() >= 200);
        assert!(s.heldout.iter().all(|h| !s.train.contains(h)));
    }
}
