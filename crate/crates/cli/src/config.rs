//! Run configuration file.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dto_core::{CorpusConfig, EvalConfig, ModelConfig, TrainConfig, UnlearnConfig};
use serde::{Deserialize, Serialize};

/// One JSON document covering every stage. Missing fields take their
/// defaults; unknown keys are an error. `model.vocab_size` of 0 means "take it
/// from the corpus vocabulary".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Loads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.corpus.forget_fraction > 0.0 && self.corpus.forget_fraction < 1.0) {
            bail!(
                "corpus.forget_fraction must lie in (0, 1), got {}",
                self.corpus.forget_fraction
            );
        }
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            // the smallest legal vocabulary, just to check the other fields
            model.vocab_size = 9;
        }
        model.validate()?;
        self.train.validate()?;
        self.unlearn.validate()?;
        if self.eval.max_decode == 0 {
            bail!("eval.max_decode must be at least 1");
        }
        Ok(())
    }

    /// Model configuration for a corpus with `vocab_size` tokens.
    pub fn model_for(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = vocab_size;
        } else if model.vocab_size != vocab_size {
            bail!(
                "model.vocab_size is {} but the corpus vocabulary has {} tokens",
                model.vocab_size,
                vocab_size
            );
        }
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let partial = RunConfig::from_json(r#"{"unlearn": {"k": 0.3}}"#).unwrap();
        assert_eq!(partial.unlearn.k, 0.3);
        assert_eq!(partial.unlearn.suffix_ratio, 0.25);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_json(r#"{"optimizer": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"unlearn": {"k": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"heads": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"batch_size": 0}}"#).is_err());
    }

    #[test]
    fn vocab_size_resolution() {
        let c = RunConfig::default();
        assert_eq!(c.model_for(600).unwrap().vocab_size, 600);
        let mut fixed = c.clone();
        fixed.model.vocab_size = 500;
        assert!(fixed.model_for(600).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}
