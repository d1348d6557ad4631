//! Versioned run configuration.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` TOML
//! file, command-line flags. The resolved configuration is written next to
//! every output together with its SHA-256.

use std::path::Path;

use attrmogen_core::eval::{AttributeClassifierConfig, EvalConfig, FeatureExtractorConfig};
use attrmogen_core::synth::SynthSpec;
use attrmogen_core::transformer::text::AttrInText;
use attrmogen_core::transformer::MaskedTransformerConfig;
use attrmogen_core::vqvae::DecoupVqvaeConfig;
use attrmogen_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "config.sha256";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// When set, replaces the seed of every section.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub vqvae: DecoupVqvaeConfig,
    #[serde(default)]
    pub transformer: MaskedTransformerConfig,
    #[serde(default)]
    pub extractor: FeatureExtractorConfig,
    #[serde(default)]
    pub classifier: AttributeClassifierConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub bounds: BoundsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            synth: SynthSection::default(),
            preprocess: PreprocessConfig::default(),
            vqvae: DecoupVqvaeConfig::default(),
            transformer: MaskedTransformerConfig::default(),
            extractor: FeatureExtractorConfig::default(),
            classifier: AttributeClassifierConfig::default(),
            eval: EvalSection::default(),
            protocol: ProtocolSection::default(),
            bounds: BoundsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_per_cell: usize,
    pub spec: SynthSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_per_cell: 16,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub vel_threshold: f32,
    pub outlier_threshold: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Records failing the jitter check are dropped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<JitterConfig>,
    /// Gaussian denoising width in frames.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoise_sigma: Option<f64>,
    pub split_ratio: [f64; 3],
    pub split_seed: u64,
    /// Append a mirrored copy of every training record.
    pub mirror_augment: bool,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            jitter: None,
            denoise_sigma: None,
            split_ratio: [0.8, 0.05, 0.15],
            split_seed: 0,
            mirror_augment: false,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub generator: String,
    pub split: String,
    pub metrics: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            generator: "pipeline".into(),
            split: "test".into(),
            metrics: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub generator: String,
    pub judges: Vec<String>,
    pub mode: String,
    pub split: String,
    pub seed: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            generator: "pipeline".into(),
            judges: vec!["classifier".into()],
            mode: "shuffled".into(),
            split: "test".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub entropy_trials: usize,
    pub kl_trials: usize,
    pub seed: u64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            entropy_trials: 1000,
            kl_trials: 200,
            seed: 0,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub attr_in_text: Option<AttrInText>,
    pub trials: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Apply flags, then push the global seed into every section.
    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(n) = o.iterations {
            self.vqvae.iterations = n;
            self.transformer.steps = n;
            self.extractor.steps = n;
            self.classifier.steps = n;
        }
        if let Some(a) = o.alpha {
            self.vqvae.alpha = a;
        }
        if let Some(l) = o.lambda {
            self.vqvae.lambda = l;
        }
        if let Some(m) = o.attr_in_text {
            self.transformer.attr_in_text = m;
        }
        if let Some(t) = o.trials {
            self.bounds.entropy_trials = t;
            self.bounds.kl_trials = t;
        }
        if let Some(s) = self.seed {
            self.synth.spec.seed = s;
            self.preprocess.split_seed = s;
            self.vqvae.seed = s;
            self.transformer.seed = s;
            self.extractor.seed = s;
            self.classifier.seed = s;
            self.eval.metrics.seed = s;
            self.protocol.seed = s;
            self.bounds.seed = s;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
