//! Run configuration: one JSON document with a section per pipeline stage.
//! Every section is optional; missing keys take their defaults and unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pixseq_core::contrastive::{ContrastiveTrainConfig, DualEncoderConfig};
use pixseq_core::inference::SamplerConfig;
use pixseq_core::optim::AdafactorConfig;
use pixseq_core::seq2seq::{ModelConfig, PretrainConfig, TrainConfig};
use pixseq_core::superres::{SuperResConfig, SuperResTrainConfig};
use pixseq_core::vq::{TokenizerConfig, TokenizerTrainConfig};
use pixseq_sim::{PipelineSpec, ShardSpec};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    /// Explicit Adafactor settings; `null` rescales the preset schedule to
    /// `model.train.steps`.
    pub optimizer: Option<AdafactorConfig>,
    pub sampler: SamplerConfig,
    pub reranker: RerankerSection,
    pub sim: SimSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Seed of the train / held-out split of the scene space.
    pub seed: u64,
    pub heldout_fraction: f64,
    /// Upper bound on the subword vocabulary, specials included.
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, heldout_fraction: 0.15, vocab_size: 512 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub arch: TokenizerConfig,
    pub train: TokenizerTrainConfig,
    /// Rebuild the decoder at this size and retrain it alone afterwards.
    pub finetune: Option<DecoderFinetune>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderFinetune {
    pub width: usize,
    pub layers: usize,
    pub steps: usize,
}

impl Default for DecoderFinetune {
    fn default() -> Self {
        Self { width: 128, layers: 2, steps: 1000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: ModelConfig,
    pub train: ModelTrain,
    /// Masked-token pretraining of the text encoder before the main run.
    pub pretrain: Option<PretrainConfig>,
    pub superres: SuperResSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelTrain {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub base_lr: f64,
}

impl Default for ModelTrain {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { steps: t.steps, batch: t.batch, seed: t.seed, base_lr: t.base_lr }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperResSection {
    pub arch: SuperResConfig,
    pub train: SuperResTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankerSection {
    pub arch: DualEncoderConfig,
    pub train: ContrastiveTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub pipeline: PipelineSpec,
    pub shard: ShardSpec,
}

impl RunConfig {
    /// Reads and validates `path`, or returns the validated defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::data(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks every section and the cross-section agreements the pipeline
    /// relies on.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.heldout_fraction > 0.0 && d.heldout_fraction < 1.0) {
            return Err(CliError::usage(format!("data.heldout_fraction must be in (0, 1), got {}", d.heldout_fraction)));
        }
        self.tokenizer.arch.validate()?;
        self.model.arch.validate()?;
        self.reranker.arch.validate()?;
        self.sampler.validate(self.model.arch.image_vocab)?;
        self.sim.pipeline.validate()?;
        let (t, m) = (&self.tokenizer.arch, &self.model.arch);
        if t.codebook_size != m.image_vocab || t.grid() != m.grid_h || t.grid() != m.grid_w {
            return Err(CliError::usage(format!(
                "model image grid {}x{} over {} codes does not match tokenizer grid {g}x{g} over {}",
                m.grid_h,
                m.grid_w,
                m.image_vocab,
                t.codebook_size,
                g = t.grid()
            )));
        }
        if d.vocab_size > m.text_vocab || d.vocab_size > self.reranker.arch.text_vocab {
            return Err(CliError::usage(format!(
                "data.vocab_size {} exceeds the model or reranker text vocabulary",
                d.vocab_size
            )));
        }
        for (name, steps, batch) in [
            ("tokenizer.train", self.tokenizer.train.steps, self.tokenizer.train.batch),
            ("model.train", self.model.train.steps, self.model.train.batch),
            ("reranker.train", self.reranker.train.steps, self.reranker.train.batch),
        ] {
            if steps == 0 || batch == 0 {
                return Err(CliError::usage(format!("{name}: steps and batch must be positive")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.model.train;
        TrainConfig { steps: t.steps, batch: t.batch, seed: t.seed, base_lr: t.base_lr, optimizer: self.optimizer }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"arch": {"d_modle": 8}}}"#).is_err());
    }

    #[test]
    fn mismatched_grid_is_a_usage_error() {
        let mut cfg = RunConfig::default();
        cfg.model.arch.grid_h = 4;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }
}
