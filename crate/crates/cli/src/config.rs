use std::path::{Path, PathBuf};

use duet_core::evaluation::ExtractorConfig;
use duet_core::generation::DecodeOptions;
use duet_core::motion::GeneratorConfig;
use duet_core::text::{ExternalEmbeddings, TextBackend};
use duet_core::transformer::train::TransformerTrainConfig;
use duet_core::transformer::TransformerConfig;
use duet_core::vq::{VqConfig, VqTrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub vq_checkpoint: Option<PathBuf>,
    pub transformer_checkpoint: Option<PathBuf>,
    pub extractor_checkpoint: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSettings {
    /// JSON map from text to vector; the hashed encoder when absent.
    pub external: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub r_precision_pool: usize,
    pub diversity_pairs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { r_precision_pool: 32, diversity_pairs: 300 }
    }
}

/// Every tunable of every command. Missing keys take their defaults,
/// unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub vq: VqConfig,
    pub vq_train: VqTrainConfig,
    pub transformer: TransformerConfig,
    pub transformer_train: TransformerTrainConfig,
    pub interaction: DecodeOptions,
    pub reaction: DecodeOptions,
    pub extractor: ExtractorConfig,
    pub evaluation: EvalSettings,
    pub text: TextSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig::default(),
            vq: VqConfig::default(),
            vq_train: VqTrainConfig::default(),
            transformer: TransformerConfig::default(),
            transformer_train: TransformerTrainConfig::default(),
            interaction: DecodeOptions::interaction(),
            reaction: DecodeOptions::reaction(),
            extractor: ExtractorConfig::default(),
            evaluation: EvalSettings::default(),
            text: TextSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::Config(e.to_string()))
    }

    pub fn text_backend(&self) -> Result<TextBackend, Failure> {
        Ok(match &self.text.external {
            None => TextBackend::Hash,
            Some(p) => TextBackend::External(ExternalEmbeddings::load(p)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_nested_objects_fill_in() {
        let c = RunConfig::parse(r#"{"seed": 4, "vq": {"codebook_size": 64}, "interaction": {"iterations": 8}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.vq.codebook_size, 64);
        assert_eq!(c.vq.latent_dim, VqConfig::default().latent_dim);
        assert_eq!(c.interaction.iterations, 8);
        assert_eq!(c.interaction.cfg_scale, 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [r#"{"sed": 1}"#, r#"{"vq": {"codebook": 3}}"#, r#"{"vq": {"ema": {"decay": 0.9, "oops": 1}}}"#] {
            assert!(matches!(RunConfig::parse(bad), Err(Failure::Config(_))), "{bad}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig { seed: 9, ..RunConfig::default() };
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }
}
