//! Long-tailed dataset representation: manifests, budgets, and fold splits.
//!
//! A dataset is loaded from a line-delimited JSON manifest where each record
//! names an image file, an optional mask file, and an integer label. On load
//! the class indices are remapped so that class 0 is the most populous class
//! and counts decrease from there, which is the ordering every downstream
//! stage assumes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One line of a dataset manifest. Paths are resolved relative to the
/// manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub label: u32,
}

/// Binary region-of-interest mask stored as a 1x1xHxW tensor with values
/// in {0, 1}.
#[derive(Debug, Clone)]
pub struct BinaryMask(Tensor);

impl BinaryMask {
    /// Wraps a tensor, rejecting any value other than exactly 0.0 or 1.0.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.n != 1 || t.c != 1 {
            return Err(Error::validation(format!(
                "mask must have shape 1x1xHxW, got {}x{}x{}x{}",
                t.n, t.c, t.h, t.w
            )));
        }
        if t.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation("mask values must be exactly 0 or 1"));
        }
        Ok(Self(t))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.h
    }

    pub fn width(&self) -> usize {
        self.0.w
    }

    /// Number of foreground (value 1) pixels.
    pub fn ones_count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == 1.0).count()
    }

    /// Foreground pixels as a fraction of the full mask area.
    pub fn area_fraction(&self) -> f64 {
        self.ones_count() as f64 / (self.0.h * self.0.w) as f64
    }
}

/// A single image with its label, optional mask, and optional background.
///
/// The background is the image with the masked region blanked out; it is
/// derived by the segmentation stage, so freshly loaded samples carry `None`
/// until that stage has run.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub sample_id: String,
    /// 1xCxHxW tensor with values in [0, 1].
    pub image: Tensor,
    /// Class index after head-first remapping.
    pub label: usize,
    pub mask: Option<BinaryMask>,
    pub background: Option<Tensor>,
}

impl LabeledSample {
    /// Checks the cross-field invariants: mask and background shapes match
    /// the image, and the background agrees with the image wherever the mask
    /// is zero.
    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            if mask.height() != self.image.h || mask.width() != self.image.w {
                return Err(Error::validation(format!(
                    "sample {}: mask {}x{} does not match image {}x{}",
                    self.sample_id,
                    mask.height(),
                    mask.width(),
                    self.image.h,
                    self.image.w
                )));
            }
        }
        if let Some(bg) = &self.background {
            if (bg.c, bg.h, bg.w) != (self.image.c, self.image.h, self.image.w) {
                return Err(Error::validation(format!(
                    "sample {}: background shape does not match image",
                    self.sample_id
                )));
            }
            let mask = self.mask.as_ref().ok_or_else(|| {
                Error::validation(format!(
                    "sample {}: background present without a mask",
                    self.sample_id
                ))
            })?;
            let m = mask.as_tensor();
            for ch in 0..self.image.c {
                let img = self.image.plane(0, ch);
                let bgp = bg.plane(0, ch);
                for idx in 0..img.len() {
                    if m.data[idx] == 0.0 && img[idx] != bgp[idx] {
                        return Err(Error::validation(format!(
                            "sample {}: background differs from image outside the mask",
                            self.sample_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A labelled image collection ordered head class first.
#[derive(Debug, Clone)]
pub struct LongTailDataset {
    pub samples: Vec<LabeledSample>,
    /// Per-class sample counts, indexed by remapped class.
    pub class_counts: Vec<usize>,
    pub num_classes: usize,
    /// Original manifest label for each remapped class index.
    pub class_order: Vec<u32>,
}

impl LongTailDataset {
    /// Builds a dataset from samples whose labels are already remapped.
    /// Counts are recomputed; the head-first ordering of `class_order` is
    /// taken on trust, so this is intended for subsets of a loaded dataset.
    pub fn from_samples(samples: Vec<LabeledSample>, class_order: Vec<u32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("dataset has no samples"));
        }
        let num_classes = class_order.len();
        let mut class_counts = vec![0usize; num_classes];
        for s in &samples {
            if s.label >= num_classes {
                return Err(Error::validation(format!(
                    "sample {} has label {} but only {} classes are declared",
                    s.sample_id, s.label, num_classes
                )));
            }
            class_counts[s.label] += 1;
        }
        Ok(Self {
            samples,
            class_counts,
            num_classes,
            class_order,
        })
    }

    pub fn total(&self) -> usize {
        self.samples.len()
    }

    /// Count of the most populous class.
    pub fn head_count(&self) -> usize {
        self.class_counts.iter().copied().max().unwrap_or(0)
    }

    /// Dataset restricted to the given sample indices, keeping labels and
    /// class ordering.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect::<Vec<_>>();
        Self::from_samples(samples, self.class_order.clone())
    }

    /// Sample indices belonging to one class.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Raw and retained synthetic-sample budgets per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBudget {
    /// Head count minus class count, clamped at zero.
    pub per_class_raw: Vec<usize>,
    pub gamma: f64,
    /// floor(gamma * raw) per class.
    pub per_class_clean: Vec<usize>,
}

/// Maps original labels to head-first class indices.
///
/// Classes are ordered by descending count; equal counts fall back to
/// ascending original label so the head class is well defined.
pub fn sort_classes(counts_by_label: &BTreeMap<u32, usize>) -> Vec<(u32, usize)> {
    let mut order: Vec<(u32, usize)> = counts_by_label.iter().map(|(&l, &c)| (l, c)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    order
}

/// Reads a line-delimited JSON manifest without touching the referenced
/// image files.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: format!("line {}: {}", lineno + 1, e),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Writes manifest records as line-delimited JSON.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit RGB image as a 1x3xHxW tensor scaled to [0, 1].
pub fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(1, 3, h, w);
    for (x, y, pixel) in img.enumerate_pixels() {
        for ch in 0..3 {
            t.plane_mut(0, ch)[y as usize * w + x as usize] = pixel.0[ch] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Saves a 1xCxHxW tensor as an 8-bit image, clamping values to [0, 1].
/// Single-channel tensors become grayscale files, three-channel RGB.
pub fn save_image_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match t.c {
        1 => {
            let mut img = image::GrayImage::new(t.w as u32, t.h as u32);
            let plane = t.plane(0, 0);
            for (x, y, pixel) in img.enumerate_pixels_mut() {
                pixel.0[0] = to_u8(plane[y as usize * t.w + x as usize]);
            }
            img.save(path).map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })
        }
        3 => {
            let mut img = image::RgbImage::new(t.w as u32, t.h as u32);
            for (x, y, pixel) in img.enumerate_pixels_mut() {
                for ch in 0..3 {
                    pixel.0[ch] = to_u8(t.plane(0, ch)[y as usize * t.w + x as usize]);
                }
            }
            img.save(path).map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })
        }
        other => Err(Error::validation(format!(
            "cannot save tensor with {} channels as an image",
            other
        ))),
    }
}

/// Loads a mask file, requiring every pixel to be exactly 0 or 255.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(1, 1, h, w);
    for (x, y, pixel) in img.enumerate_pixels() {
        t.data[y as usize * w + x as usize] = match pixel.0[0] {
            0 => 0.0,
            255 => 1.0,
            v => {
                return Err(Error::validation(format!(
                    "mask {} has pixel value {}, expected 0 or 255",
                    path.display(),
                    v
                )))
            }
        };
    }
    BinaryMask::from_tensor(t)
}

/// Saves a mask as an 8-bit grayscale file with values in {0, 255}.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let t = mask.as_tensor();
    let mut img = image::GrayImage::new(t.w as u32, t.h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        pixel.0[0] = if t.data[y as usize * t.w + x as usize] == 1.0 {
            255
        } else {
            0
        };
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest and all referenced images and masks.
///
/// Labels in the manifest may be any integers; they are remapped so that
/// class 0 has the most samples. Every label between 0 and the maximum seen
/// must occur at least once, all images must share one shape, and sample ids
/// must be unique.
pub fn load_manifest(path: &Path) -> Result<LongTailDataset> {
    let records = read_manifest(path)?;
    if records.is_empty() {
        return Err(Error::validation(format!(
            "manifest {} has no records",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    let mut counts_by_label: BTreeMap<u32, usize> = BTreeMap::new();
    for r in &records {
        *counts_by_label.entry(r.label).or_insert(0) += 1;
    }
    let max_label = *counts_by_label.keys().last().unwrap();
    for label in 0..=max_label {
        if !counts_by_label.contains_key(&label) {
            return Err(Error::validation(format!(
                "label {} is missing: labels must cover 0..={}",
                label, max_label
            )));
        }
    }
    let order = sort_classes(&counts_by_label);
    let mut remap: BTreeMap<u32, usize> = BTreeMap::new();
    let mut class_order = Vec::with_capacity(order.len());
    for (new_idx, (orig, _)) in order.iter().enumerate() {
        remap.insert(*orig, new_idx);
        class_order.push(*orig);
    }

    let mut seen_ids = std::collections::BTreeSet::new();
    let mut samples = Vec::with_capacity(records.len());
    let mut shape: Option<(usize, usize, usize)> = None;
    for r in &records {
        if !seen_ids.insert(r.sample_id.clone()) {
            return Err(Error::validation(format!(
                "duplicate sample_id {}",
                r.sample_id
            )));
        }
        let image = load_image_tensor(&resolve(&base, &r.image_path))?;
        match shape {
            None => shape = Some((image.c, image.h, image.w)),
            Some(s) => {
                if s != (image.c, image.h, image.w) {
                    return Err(Error::validation(format!(
                        "sample {} has shape {}x{}x{}, expected {}x{}x{}",
                        r.sample_id, image.c, image.h, image.w, s.0, s.1, s.2
                    )));
                }
            }
        }
        let mask = match &r.mask_path {
            Some(mp) => Some(load_mask(&resolve(&base, mp))?),
            None => None,
        };
        let sample = LabeledSample {
            sample_id: r.sample_id.clone(),
            image,
            label: remap[&r.label],
            mask,
            background: None,
        };
        sample.validate()?;
        samples.push(sample);
    }
    LongTailDataset::from_samples(samples, class_order)
}

/// floor(gamma * n), robust to the product landing a few ulps below an
/// integer: values within one part in 10^9 of an integer are treated as
/// that integer, so short-decimal fractions of integer counts floor
/// exactly (0.58 * 50 must give 29, not 28).
pub fn scaled_floor(gamma: f64, n: usize) -> usize {
    let x = gamma * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Computes per-class synthetic budgets: raw deficit against the head class
/// and the retained fraction after filtering.
pub fn compute_budget(dataset: &LongTailDataset, gamma: f64) -> Result<SyntheticBudget> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::validation(format!(
            "gamma must be in [0, 1], got {}",
            gamma
        )));
    }
    let head = dataset.head_count();
    let per_class_raw: Vec<usize> = dataset
        .class_counts
        .iter()
        .map(|&c| head.saturating_sub(c))
        .collect();
    let per_class_clean = per_class_raw
        .iter()
        .map(|&r| scaled_floor(gamma, r))
        .collect();
    Ok(SyntheticBudget {
        per_class_raw,
        gamma,
        per_class_clean,
    })
}

/// Splits sample indices into k stratified folds.
///
/// Each class is shuffled once with the given seed and dealt into k nearly
/// equal test folds, so per-class fold sizes differ by at most one. Returns
/// (train, test) index pairs; test folds are disjoint and cover the dataset.
pub fn stratified_kfold(
    dataset: &LongTailDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::validation(format!("folds must be >= 2, got {}", k)));
    }
    for (class, &count) in dataset.class_counts.iter().enumerate() {
        if count < k {
            return Err(Error::validation(format!(
                "class {} has {} samples, fewer than {} folds",
                class, count, k
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..dataset.num_classes {
        let mut idxs = dataset.indices_of_class(class);
        idxs.shuffle(&mut rng);
        let base = idxs.len() / k;
        let rem = idxs.len() % k;
        let mut cursor = 0;
        for (f, fold) in test_folds.iter_mut().enumerate() {
            let take = base + usize::from(f < rem);
            fold.extend_from_slice(&idxs[cursor..cursor + take]);
            cursor += take;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for test in test_folds {
        let mut test = test;
        test.sort_unstable();
        let mut in_test = vec![false; dataset.total()];
        for &i in &test {
            in_test[i] = true;
        }
        let train: Vec<usize> = (0..dataset.total()).filter(|&i| !in_test[i]).collect();
        folds.push((train, test));
    }
    Ok(folds)
}
