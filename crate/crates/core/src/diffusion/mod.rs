//! Class-conditional latent inpainting diffusion: noise schedule, latent
//! codec, class embedding, conditioned denoiser, fine-tuning, and the
//! reverse sampler.

pub mod codec;
pub mod conditioning;
pub mod denoiser;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use codec::LatentCodec;
pub use conditioning::{timestep_features, ClassEmbedding};
pub use denoiser::Denoiser;
pub use sampling::{composite, generate, generate_batch, generate_for_class, GeneratedSample};
pub use schedule::{build_schedule, forward_sample, NoiseSchedule};
pub use training::{
    condition_sample, denoise_loss, denoise_step, finetune, ConditionedLatent, FinetuneOutcome,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::container;
use crate::error::{Error, Result};
use crate::selection::read_param;

pub const DIFFUSION_KIND: &str = "diffusion-model";

/// Everything needed to sample: the jointly trained denoiser and class
/// embedder, the frozen codec, and the schedule, plus the config they were
/// built from.
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub embedder: ClassEmbedding,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
    pub config: PipelineConfig,
    pub num_classes: usize,
}

impl DiffusionModel {
    /// Writes one self-contained checkpoint: denoiser, embedder, codec,
    /// schedule betas, config snapshot, and any extra metadata.
    pub fn save(&mut self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = json!({
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "num_classes": self.num_classes,
            "codec": self.codec.meta_json(),
            "extra": extra,
        });
        let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, p) in self.denoiser.param_blocks() {
            blocks.push((name.to_string(), p.value.clone()));
        }
        for (name, p) in self.embedder.param_blocks() {
            blocks.push((name.to_string(), p.value.clone()));
        }
        let codec_names = self.codec.block_names();
        let codec_params = self.codec.params_mut();
        for (name, p) in codec_names.iter().zip(codec_params) {
            blocks.push((format!("codec.{name}"), p.value.clone()));
        }
        blocks.push(("schedule.betas".to_string(), self.schedule.betas().to_vec()));
        let block_refs: Vec<(&str, &[f64])> = blocks
            .iter()
            .map(|(n, v)| (n.as_str(), v.as_slice()))
            .collect();
        container::save_checkpoint(path, DIFFUSION_KIND, meta, &block_refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = container::load_checkpoint(path)?;
        ck.expect_kind(DIFFUSION_KIND)?;
        let config: PipelineConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::State(format!("bad config in diffusion checkpoint: {e}")))?;
        let num_classes = ck.meta["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::State("diffusion checkpoint missing 'num_classes'".into()))?
            as usize;

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut embedder = ClassEmbedding::new(num_classes, config.class_embedding_dim, &mut rng);
        let mut denoiser = Denoiser::new(
            config.latent_channels,
            config.denoiser_channels,
            config.class_embedding_dim,
            &mut rng,
        );
        for (name, p) in denoiser.param_blocks_mut() {
            read_param(&ck, name, p)?;
        }
        for (name, p) in embedder.param_blocks_mut() {
            read_param(&ck, name, p)?;
        }
        let codec = LatentCodec::from_checkpoint_blocks(&ck.meta["codec"].clone(), &ck, "codec.")?;
        let betas = ck.block("schedule.betas")?.to_vec();
        let schedule = NoiseSchedule::from_betas(betas)?;
        Ok(Self {
            denoiser,
            embedder,
            codec,
            schedule,
            config,
            num_classes,
        })
    }
}
