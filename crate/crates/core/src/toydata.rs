//! Procedural long-tailed toy corpus.
//!
//! Four classes of 16x16 "lesion on skin" images: a light skin-toned
//! background with a dark roughly circular blob whose color and internal
//! texture depend on the class. The blob is always darker than the skin, so
//! threshold segmentation recovers it, and the class signal lives in both
//! hue and texture, so a small classifier and a small generative model can
//! each pick it up.
//!
//! Class patterns: 0 solid brown, 1 reddish horizontal stripes, 2 slate
//! checkerboard, 3 greenish concentric rings.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    load_manifest, save_image_tensor, write_manifest, LabeledSample, LongTailDataset,
    ManifestRecord,
};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Default class counts for the trend experiments: one head, two mid, one
/// rare tail class.
pub const DEFAULT_COUNTS: [usize; 4] = [2000, 500, 100, 20];

const NUM_CLASSES: usize = 4;

fn lesion_tones(label: usize) -> ([f64; 3], [f64; 3]) {
    match label {
        0 => ([0.34, 0.22, 0.16], [0.30, 0.20, 0.15]),
        1 => ([0.46, 0.16, 0.14], [0.20, 0.08, 0.08]),
        2 => ([0.28, 0.30, 0.38], [0.12, 0.14, 0.20]),
        _ => ([0.18, 0.36, 0.20], [0.08, 0.16, 0.10]),
    }
}

fn pattern_pick(label: usize, x: usize, y: usize, dist: f64) -> bool {
    match label {
        0 => true,
        1 => y % 4 < 2,
        2 => (x / 2 + y / 2) % 2 == 0,
        _ => (dist as usize) % 2 == 0,
    }
}

fn toy_image(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let base = [
        0.72 + rng.random_range(-0.04..0.04),
        0.58 + rng.random_range(-0.04..0.04),
        0.52 + rng.random_range(-0.04..0.04),
    ];
    let slope = rng.random_range(-0.006..0.006);
    let r_max = size as f64 * 0.33;
    let r_min = size as f64 * 0.24;
    let radius = rng.random_range(r_min..r_max);
    let jitter = size as f64 * 0.08;
    let cy = (size as f64 - 1.0) / 2.0 + rng.random_range(-jitter..jitter);
    let cx = (size as f64 - 1.0) / 2.0 + rng.random_range(-jitter..jitter);
    let (tone_a, tone_b) = lesion_tones(label);

    let mut image = Tensor::zeros(1, 3, size, size);
    for y in 0..size {
        for x in 0..size {
            let dist = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let inside = dist <= radius;
            for c in 0..3 {
                let v = if inside {
                    let tone = if pattern_pick(label, x, y, dist) {
                        tone_a[c]
                    } else {
                        tone_b[c]
                    };
                    tone + rng.random_range(-0.03..0.03)
                } else {
                    base[c] + slope * y as f64 + rng.random_range(-0.03..0.03)
                };
                image.plane_mut(0, c)[y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Builds the procedural dataset with the given per-class counts. Class 0
/// must be the most populous (labels are head-first by construction).
pub fn make_toy_dataset(counts: &[usize], size: usize, seed: u64) -> Result<LongTailDataset> {
    if counts.len() != NUM_CLASSES {
        return Err(Error::validation(format!(
            "toy dataset has {} classes, got {} counts",
            NUM_CLASSES,
            counts.len()
        )));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::validation("every toy class needs at least one sample"));
    }
    if counts.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::validation(
            "toy class counts must be non-increasing (head first)",
        ));
    }
    if size < 8 {
        return Err(Error::validation("toy images must be at least 8x8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (label, &count) in counts.iter().enumerate() {
        for i in 0..count {
            samples.push(LabeledSample {
                sample_id: format!("toy{label}-{i:05}"),
                image: toy_image(label, size, &mut rng),
                label,
                mask: None,
                background: None,
            });
        }
    }
    LongTailDataset::from_samples(samples, (0..NUM_CLASSES as u32).collect())
}

/// Writes the dataset as PNGs plus a manifest, the same layout `load_manifest`
/// reads back.
pub fn write_toy_corpus(dataset: &LongTailDataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::with_capacity(dataset.total());
    for sample in &dataset.samples {
        let rel = format!("images/{}.png", sample.sample_id);
        save_image_tensor(&dir.join(&rel), &sample.image)?;
        records.push(ManifestRecord {
            sample_id: sample.sample_id.clone(),
            image_path: rel,
            mask_path: None,
            label: sample.label as u32,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)
}

/// Round-trip helper: write the corpus and load it back through the
/// manifest reader.
pub fn write_and_reload(dataset: &LongTailDataset, dir: &Path) -> Result<LongTailDataset> {
    write_toy_corpus(dataset, dir)?;
    load_manifest(&dir.join("manifest.jsonl"))
}
