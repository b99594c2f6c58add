//! Experiment configuration read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::CorpusConfig;
use super::eval::SweepConfig;
use super::text::VOCAB_SIZE;
use super::train::TrainConfig;
use crate::decoding::{BeamConfig, LmConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::transformer::ModelConfig;

/// Every knob of one run. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub lm: LmConfig,
    pub train: TrainConfig,
    pub decode: BeamConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fusion.validate()?;
        self.lm.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.sweep.validate()?;
        if self.model.vocab != VOCAB_SIZE || self.lm.vocab != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "model.vocab and lm.vocab must be {VOCAB_SIZE} for the synthetic token set (got {} and {})",
                self.model.vocab, self.lm.vocab
            )));
        }
        Ok(())
    }

    /// A configuration small enough to train end to end in about a minute.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.corpus.train = 48;
        cfg.corpus.dev = 4;
        cfg.corpus.test = 6;
        cfg.model = ModelConfig { d_att: 16, heads: 2, encoder_blocks: 1, decoder_blocks: 1, ctc_blocks: 0, ff_dim: 32, vocab: VOCAB_SIZE, dropout: 0.1 };
        cfg.fusion = FusionConfig { dfn_widths: [32, 16, 16], blstm_layers: 1, blstm_cells: 8, dropout: 0.1, weightnet_hidden: [8, 8] };
        cfg.lm = LmConfig { layers: 1, units: 16, vocab: VOCAB_SIZE };
        cfg.train.epochs = 2;
        cfg.train.av_epochs = 1;
        cfg.train.fusion_epochs = 1;
        cfg.train.lm_epochs = 1;
        cfg.train.batch = 8;
        cfg.train.warmup = 10;
        cfg.decode.beam = 3;
        cfg.sweep.snrs = vec![-6.0, 6.0];
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_errors() {
        let cfg = ExperimentConfig::smoke();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
        let partial = ExperimentConfig::from_toml("[decode]\nalpha = 0.5\n").unwrap();
        assert_eq!(partial.decode.alpha, 0.5);
        for bad in ["[model]\nvocab = 30\n", "[decode]\nbeam = 0\n", "[nope]\n", "[train]\nbatch = \"x\"\n"] {
            assert!(matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
        let missing = ExperimentConfig::load(Path::new("/nonexistent/avfuse.toml"));
        assert!(matches!(missing, Err(Error::MissingArtifact(_))));
    }
}
