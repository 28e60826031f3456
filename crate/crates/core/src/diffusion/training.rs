//! Noise-prediction objective and the fine-tuning loop.
//!
//! Each training example becomes a conditioned latent: the image and its
//! lesion-free background are encoded, the same noise draw is added to both
//! at the sampled timestep, and the rescaled mask joins them as an extra
//! channel. The denoiser and the class embedder train jointly; the codec
//! stays frozen.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::PipelineConfig;
use crate::dataset::{LabeledSample, LongTailDataset};
use crate::diffusion::codec::LatentCodec;
use crate::diffusion::conditioning::ClassEmbedding;
use crate::diffusion::denoiser::Denoiser;
use crate::diffusion::schedule::{build_schedule, forward_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{mse_with_grad, Adam, Tensor};
use crate::segmentation::rescale_mask;
use crate::selection::{oversample_all, ClassWeightTable};

/// One sample prepared for the denoiser: noisy image latent, noisy
/// background latent, rescaled mask, and their channel concatenation.
pub struct ConditionedLatent {
    pub z_xt: Tensor,
    pub z_dt: Tensor,
    pub b_star: Tensor,
    pub z: Tensor,
    pub t: usize,
    pub label: usize,
}

pub fn draw_noise_like(shape: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let mut eps = Tensor::zeros(shape.n, shape.c, shape.h, shape.w);
    for v in &mut eps.data {
        *v = StandardNormal.sample(rng);
    }
    eps
}

fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let first = parts[0];
    let total_c: usize = parts.iter().map(|p| p.c).sum();
    let mut out = Tensor::zeros(first.n, total_c, first.h, first.w);
    let mut offset = 0;
    for part in parts {
        for n in 0..part.n {
            for c in 0..part.c {
                out.plane_mut(n, offset + c).copy_from_slice(part.plane(n, c));
            }
        }
        offset += part.c;
    }
    out
}

/// Builds the conditioned latent for one sample at timestep `t`. The image
/// latent is noised with `eps` (the prediction target) and the background
/// latent with the independent `eps_bg`. Independence matters: were the
/// draws shared, the background channels would reveal the target noise and
/// the denoiser could fit the objective without modeling image content,
/// which collapses at sampling time where no such correlation exists.
pub fn condition_sample(
    sample: &LabeledSample,
    t: usize,
    eps: &Tensor,
    eps_bg: &Tensor,
    sched: &NoiseSchedule,
    codec: &LatentCodec,
) -> Result<ConditionedLatent> {
    let mask = sample.mask.as_ref().ok_or_else(|| {
        Error::validation(format!("sample '{}' has no mask", sample.sample_id))
    })?;
    let background = sample.background.as_ref().ok_or_else(|| {
        Error::validation(format!("sample '{}' has no background", sample.sample_id))
    })?;
    let z_x0 = codec.encode(&sample.image)?;
    let z_d0 = codec.encode(background)?;
    let z_xt = forward_sample(&z_x0, t, eps, sched)?;
    let z_dt = forward_sample(&z_d0, t, eps_bg, sched)?;
    let b_star = rescale_mask(mask, codec.factor())?.as_tensor().clone();
    let z = concat_channels(&[&z_xt, &z_dt, &b_star]);
    Ok(ConditionedLatent {
        z_xt,
        z_dt,
        b_star,
        z,
        t,
        label: sample.label,
    })
}

/// Conditioned latents for a batch plus the noise targets, drawing the
/// target and background noise tensors per sample in batch order.
fn assemble_batch(
    batch: &[&LabeledSample],
    ts: &[usize],
    sched: &NoiseSchedule,
    codec: &LatentCodec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::validation("empty denoising batch"));
    }
    if ts.len() != batch.len() {
        return Err(Error::validation(format!(
            "{} samples but {} timesteps",
            batch.len(),
            ts.len()
        )));
    }
    let mut zs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (sample, &t) in batch.iter().zip(ts) {
        let z_shape = codec.encode(&sample.image)?;
        let eps = draw_noise_like(&z_shape, rng);
        let eps_bg = draw_noise_like(&z_shape, rng);
        let cond = condition_sample(sample, t, &eps, &eps_bg, sched, codec)?;
        zs.push(cond.z);
        targets.push(eps);
        labels.push(sample.label);
    }
    let z_refs: Vec<&Tensor> = zs.iter().collect();
    let t_refs: Vec<&Tensor> = targets.iter().collect();
    Ok((Tensor::stack(&z_refs), Tensor::stack(&t_refs), labels))
}

fn mean_sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.data.len() as f64
}

/// Evaluates the noise-prediction loss on a batch without touching any
/// training caches: per-element mean squared error between the drawn noise
/// and the prediction over the image-latent channels.
pub fn denoise_loss(
    batch: &[&LabeledSample],
    ts: &[usize],
    sched: &NoiseSchedule,
    codec: &LatentCodec,
    embedder: &ClassEmbedding,
    denoiser: &Denoiser,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (z, targets, labels) = assemble_batch(batch, ts, sched, codec, rng)?;
    let y_emb = embedder.forward_no_cache(&labels)?;
    let pred = denoiser.forward_no_cache(&z, ts, &y_emb)?;
    Ok(mean_sq_diff(&pred, &targets))
}

/// One training evaluation: forward with caches, backward through denoiser
/// and embedder, gradients accumulated into their parameters. The caller
/// owns the optimizer step. Returns the batch loss.
pub fn denoise_step(
    batch: &[&LabeledSample],
    ts: &[usize],
    sched: &NoiseSchedule,
    codec: &LatentCodec,
    embedder: &mut ClassEmbedding,
    denoiser: &mut Denoiser,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (z, targets, labels) = assemble_batch(batch, ts, sched, codec, rng)?;
    let y_emb = embedder.forward(&labels)?;
    let pred = denoiser.forward(&z, ts, &y_emb)?;
    let (loss, grad) = mse_with_grad(&pred, &targets);
    let d_y_emb = denoiser.backward(&grad);
    embedder.backward(&d_y_emb);
    Ok(loss)
}

pub struct FinetuneOutcome {
    pub denoiser: Denoiser,
    pub embedder: ClassEmbedding,
    pub schedule: NoiseSchedule,
    /// Mean loss over the first 5% of steps (None when too few steps ran).
    pub first_window_loss: Option<f64>,
    /// Mean loss over the last 5% of steps.
    pub final_window_loss: Option<f64>,
}

/// Jointly trains the denoiser and class embedder on batches drawn from the
/// anomaly-weighted oversampled multiset. The codec must already be
/// pre-trained; it stays frozen here.
///
/// The smoothed loss is expected to fall between the first and last windows;
/// when it does not, that is logged as a warning rather than treated as an
/// error, since short runs on tiny datasets can be noisy.
pub fn finetune(
    dataset: &LongTailDataset,
    weights: &ClassWeightTable,
    codec: &LatentCodec,
    config: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if !codec.is_trained() {
        return Err(Error::State(
            "codec must be pre-trained before diffusion fine-tuning".into(),
        ));
    }
    let sched = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
    // Construction order is part of the determinism contract: embedder
    // first, then denoiser, then the oversampled multiset.
    let mut embedder = ClassEmbedding::new(dataset.num_classes, config.class_embedding_dim, rng);
    let mut denoiser = Denoiser::new(
        config.latent_channels,
        config.denoiser_channels,
        config.class_embedding_dim,
        rng,
    );
    let multiset = oversample_all(dataset, weights, rng)?;
    if multiset.is_empty() {
        return Err(Error::validation("oversampled multiset is empty"));
    }

    let mut adam = Adam::new(config.learning_rate);
    let window = (config.train_steps / 20).max(1);
    let mut first_window = Vec::new();
    let mut last_window = std::collections::VecDeque::new();
    for step in 0..config.train_steps {
        let batch: Vec<&LabeledSample> = (0..config.batch_size)
            .map(|_| &dataset.samples[multiset[rng.random_range(0..multiset.len())]])
            .collect();
        let ts: Vec<usize> = (0..batch.len())
            .map(|_| rng.random_range(1..=sched.steps()))
            .collect();
        let loss = denoise_step(&batch, &ts, &sched, codec, &mut embedder, &mut denoiser, rng)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: "denoising loss diverged".into(),
            });
        }
        let mut params = denoiser.params_mut();
        params.extend(embedder.params_mut());
        adam.step(&mut params);
        for p in params {
            p.zero_grad();
        }
        if step < window {
            first_window.push(loss);
        }
        last_window.push_back(loss);
        if last_window.len() > window {
            last_window.pop_front();
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let first_window_loss = (!first_window.is_empty()).then(|| mean(&first_window));
    let final_window_loss = (!last_window.is_empty())
        .then(|| last_window.iter().sum::<f64>() / last_window.len() as f64);
    if let (Some(first), Some(last)) = (first_window_loss, final_window_loss) {
        if last >= first {
            log::warn!(
                "smoothed denoising loss did not improve: first window {:.6}, last window {:.6}",
                first,
                last
            );
        }
    }
    Ok(FinetuneOutcome {
        denoiser,
        embedder,
        schedule: sched,
        first_window_loss,
        final_window_loss,
    })
}
