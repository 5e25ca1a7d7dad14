use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptors::AdaptorConfig;
use crate::backbone::{BackboneConfig, BackboneSource};
use crate::data::SyntheticSpec;
use crate::error::{GrappaError, Result};
use crate::fusion::{FusionOptions, FusionTrainConfig, FusionVariant};
use crate::pseudolabels::KMeansConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// `root/<task>/<class>/<image>`.
    Folder { root: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSection {
    pub source: BackboneSource,
    #[serde(flatten)]
    pub config: BackboneConfig,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            source: BackboneSource::RandomInit { seed: 0 },
            config: BackboneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelSection {
    /// Cluster count per granularity, strictly increasing.
    pub granularities: Vec<usize>,
    pub kmeans: KMeansConfig,
}

impl Default for PseudoLabelSection {
    fn default() -> Self {
        Self {
            granularities: vec![4, 16, 64],
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    /// Variants trained by `all`.
    pub variants: Vec<FusionVariant>,
    /// Also train the label-supervised fusion in `all`.
    pub include_supervised: bool,
    pub options: FusionOptions,
    #[serde(flatten)]
    pub train: FusionTrainConfig,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            variants: vec![FusionVariant::Avg, FusionVariant::Tc, FusionVariant::Ac],
            include_supervised: false,
            options: FusionOptions::default(),
            train: FusionTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Images per forward chunk.
    pub chunk: usize,
    /// Emit an SVG chart of RP change against the frozen backbone.
    pub chart: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { chunk: 64, chart: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Fail instead of warn when a step's inputs came from another config.
    pub strict: bool,
    pub data: DataSource,
    pub backbone: BackboneSection,
    pub pseudolabels: PseudoLabelSection,
    pub adaptors: AdaptorConfig,
    pub fusion: FusionSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            strict: false,
            data: DataSource::default(),
            backbone: BackboneSection::default(),
            pseudolabels: PseudoLabelSection::default(),
            adaptors: AdaptorConfig::default(),
            fusion: FusionSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| GrappaError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => GrappaError::Config(format!("config file {} not found", path.display())),
            _ => GrappaError::io(path, e),
        })?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GrappaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.config.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            let b = &self.backbone.config;
            if spec.image_size != b.image_height || spec.image_size != b.image_width || b.channels != 3 {
                return Err(GrappaError::Config(format!(
                    "synthetic images are {0}x{0}x3 but the backbone expects {1}x{2}x{3}",
                    spec.image_size, b.image_height, b.image_width, b.channels
                )));
            }
        }
        let ks = &self.pseudolabels.granularities;
        if ks.is_empty() || ks.windows(2).any(|w| w[1] <= w[0]) || ks[0] == 0 {
            return Err(GrappaError::Config(format!(
                "granularities must be positive and strictly increasing, got {ks:?}"
            )));
        }
        self.adaptors.bottleneck_for(self.backbone.config.dim)?;
        if self.adaptors.batch_size == 0 || self.fusion.train.batch_size < 2 || self.eval.chunk == 0 {
            return Err(GrappaError::Config("batch sizes must be positive (fusion needs at least 2)".into()));
        }
        if self.fusion.train.k_nn == 0 {
            return Err(GrappaError::Config("k_nn must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Seed of the adaptor run for granularity `i`.
    pub fn adaptor_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(1000).wrapping_add(i as u64)
    }

    pub fn fusion_seed(&self) -> u64 {
        self.seed.wrapping_add(2000)
    }
}
