use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Normalization, SamplerConfig, SyntheticConfig};
use crate::encoder::EncoderVariant;
use crate::losses::LossConfig;
use crate::network::{NetworkConfig, PANNUKE_NUCLEI_CLASSES, PANNUKE_TISSUE_CLASSES};
use crate::postprocess::PostprocessParams;
use crate::{Error, Result};

use super::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub variant: EncoderVariant,
    /// Fuse the encoder before inference.
    pub reparameterized: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { variant: EncoderVariant::S12, reparameterized: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Type-head channels, background included.
    pub num_nuclei_classes: usize,
    pub num_tissue_classes: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { num_nuclei_classes: PANNUKE_NUCLEI_CLASSES, num_tissue_classes: PANNUKE_TISSUE_CLASSES }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-epoch exponential learning-rate decay factor.
    pub gamma: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write `epoch_NNN.safetensors` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Draw batches from the balanced sampler instead of shuffled passes.
    pub balanced_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 130,
            batch_size: 16,
            lr: 3e-4,
            beta1: 0.85,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
            gamma: 0.85,
            grad_clip: 5.0,
            seed: 42,
            checkpoint_every: 1,
            balanced_sampling: true,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("decay factor {} must lie in (0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generated disk images used in place of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub count: usize,
    pub seed: u64,
    pub disks: SyntheticConfig,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self { count: 32, seed: 0, disks: SyntheticConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory in the converted layout.
    pub root: Option<PathBuf>,
    /// Folds used for training; empty means all.
    pub train_folds: Vec<u32>,
    pub synthetic: Option<SyntheticSource>,
    pub normalization: Normalization,
    pub augment: AugmentConfig,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tile_size: usize,
    pub overlap: usize,
    /// Centroid pairing radius for detection scores, in pixels.
    pub match_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tile_size: 256, overlap: 64, match_radius: 12.0 }
    }
}

/// Everything a run needs, one section per concern.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub network: NetworkSection,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub postprocess: PostprocessParams,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Network config in trainable (branch) form.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig::new(self.encoder.variant, self.network.num_nuclei_classes, self.network.num_tissue_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config().validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.postprocess.validate()?;
        if self.eval.tile_size == 0 || self.eval.tile_size % 32 != 0 {
            return Err(Error::Config(format!("tile_size {} must be a positive multiple of 32", self.eval.tile_size)));
        }
        if self.eval.overlap >= self.eval.tile_size {
            return Err(Error::Config("overlap must be smaller than tile_size".into()));
        }
        if !(self.eval.match_radius > 0.0) {
            return Err(Error::Config("match_radius must be positive".into()));
        }
        Ok(())
    }
}
