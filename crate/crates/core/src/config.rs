//! Pipeline configuration: one flat struct shared by every stage.
//!
//! Loaded from a TOML file; every field can be overridden by a CLI flag of
//! the same name. Partial files are fine, missing fields fall back to the
//! defaults below.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Side length of the (square) working images.
    pub image_size: usize,
    /// Spatial downscale factor of the latent codec.
    pub latent_downscale_factor: usize,
    /// Number of diffusion timesteps T.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Dimension of the learned class embedding (also the conditioning width).
    pub class_embedding_dim: usize,
    /// Optimizer steps for the diffusion fine-tune.
    pub train_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of generated samples kept per class by the OOD filter.
    pub gamma: f64,
    /// Number of cross-validation folds.
    pub folds: usize,
    pub rng_seed: u64,

    // Stage knobs beyond the core set above.
    /// Channels of the image latent produced by the codec.
    pub latent_channels: usize,
    /// Base channel width of the denoiser.
    pub denoiser_channels: usize,
    /// Base channel width of the latent codec.
    pub codec_channels: usize,
    /// Base channel width of the per-class anomaly scorers.
    pub scorer_channels: usize,
    /// Base channel width of the classifier.
    pub classifier_channels: usize,
    pub codec_train_steps: usize,
    pub scorer_train_steps: usize,
    pub classifier_train_steps: usize,
    /// Standardize anomaly scores (zero mean, unit variance per class)
    /// before the weight formula. Off by default: raw reconstruction
    /// errors pass through unchanged.
    pub score_standardize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            latent_downscale_factor: 2,
            diffusion_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.1,
            class_embedding_dim: 32,
            train_steps: 1500,
            learning_rate: 2e-3,
            batch_size: 16,
            gamma: 0.4,
            folds: 5,
            rng_seed: 17,
            latent_channels: 3,
            denoiser_channels: 16,
            codec_channels: 10,
            scorer_channels: 8,
            classifier_channels: 10,
            codec_train_steps: 500,
            scorer_train_steps: 300,
            classifier_train_steps: 500,
            score_standardize: false,
        }
    }
}

impl PipelineConfig {
    /// Preset sized for the 16x16 procedural toy dataset: short schedule,
    /// lean networks, runs a full fold in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            diffusion_steps: 50,
            beta_start: 4e-3,
            beta_end: 0.35,
            train_steps: 1200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::validation(format!(
                "beta range invalid: need 0 < beta_start <= beta_end < 1, got [{}, {}]",
                self.beta_start, self.beta_end
            )));
        }
        if self.diffusion_steps < 1 {
            return Err(Error::validation("diffusion_steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::validation(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.folds < 2 {
            return Err(Error::validation("folds must be >= 2"));
        }
        if self.image_size == 0 || self.image_size % self.latent_downscale_factor != 0 {
            return Err(Error::validation(format!(
                "image_size {} must be a positive multiple of latent_downscale_factor {}",
                self.image_size, self.latent_downscale_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.class_embedding_dim < 2 || self.class_embedding_dim % 2 != 0 {
            return Err(Error::validation(format!(
                "class_embedding_dim must be a positive even number, got {}",
                self.class_embedding_dim
            )));
        }
        if self.latent_channels == 0 {
            return Err(Error::validation("latent_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Spatial side length of the latent grid.
    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_downscale_factor
    }
}
