//! Training configuration, read from TOML.
//!
//! Every field has a default, so a config file only lists what it changes:
//!
//! ```toml
//! depth = 3
//! latent_dim = 2
//! architecture = "linear_feature"
//! likelihood = "gaussian_unit_variance"
//! max_steps = 3000
//!
//! [loss.weights]
//! recon_weight = 5.0
//!
//! [data]
//! kind = "synthetic"
//! depth = 3
//! latent_dim = 2
//! separation = 8.0
//! per_leaf = 500
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTreeSpec;
use crate::error::{Error, Result};
use crate::model::{Architecture, Likelihood, ModelSpec};
use crate::objective::LossConfig;
use crate::taxonomy::VarianceMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub crop: bool,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_scale: f64,
    pub crop_max_scale: f64,
    pub flip: bool,
    pub flip_prob: f64,
    pub noise: bool,
    pub noise_std: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop: true,
            crop_min_scale: 0.6,
            crop_max_scale: 1.0,
            flip: true,
            flip_prob: 0.5,
            noise: true,
            noise_std: 0.05,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self {
            crop: false,
            flip: false,
            noise: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
        /// Keep only the first `limit` samples.
        limit: Option<usize>,
    },
    Features {
        path: PathBuf,
        #[serde(default)]
        standardize: bool,
    },
    Synthetic(SyntheticTreeSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub depth: usize,
    pub latent_dim: usize,
    pub variance_mode: VarianceMode,
    pub architecture: Architecture,
    /// Hidden widths for `mlp`.
    pub hidden: Vec<usize>,
    pub likelihood: Likelihood,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub loss: LossConfig,
    pub contrastive: bool,
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Write checkpoints every this many steps; the final state is always written.
    pub checkpoint_every: Option<usize>,
    pub data: Option<DataSource>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 10,
            latent_dim: 8,
            variance_mode: VarianceMode::Isotropic,
            architecture: Architecture::Mlp,
            hidden: vec![256, 128],
            likelihood: Likelihood::Bernoulli,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 400,
            max_steps: None,
            loss: LossConfig::default(),
            contrastive: false,
            augment: AugmentSpec::default(),
            seed: 0,
            checkpoint_every: None,
            data: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative data paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.data {
            Some(DataSource::Idx { images, labels, .. }) => {
                fix(images);
                if let Some(l) = labels {
                    fix(l);
                }
            }
            Some(DataSource::Features { path, .. }) => fix(path),
            _ => {}
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be ≥ 1".into()));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("latent_dim and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        let a = &self.augment;
        if !(0.0 < a.crop_min_scale && a.crop_min_scale <= a.crop_max_scale && a.crop_max_scale <= 1.0) {
            return Err(Error::Config("crop scales must satisfy 0 < min ≤ max ≤ 1".into()));
        }
        if !(0.0..=1.0).contains(&a.flip_prob) || a.noise_std < 0.0 {
            return Err(Error::Config("flip_prob must be in [0, 1] and noise_std ≥ 0".into()));
        }
        self.loss.weights.validate()
    }

    /// Model spec for data of the given shape.
    pub fn model_spec(&self, input_shape: [usize; 3]) -> ModelSpec {
        ModelSpec {
            input_shape,
            latent_dim: self.latent_dim,
            architecture: self.architecture,
            hidden: self.hidden.clone(),
            likelihood: self.likelihood,
            projection_nodes: if self.contrastive {
                crate::taxonomy::node_count(self.depth)
            } else {
                0
            },
        }
    }
}
