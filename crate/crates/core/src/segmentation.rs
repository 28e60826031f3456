//! Region-of-interest segmentation and background extraction.
//!
//! The segmenter is deliberately simple and fully deterministic: grayscale
//! thresholding (Otsu or fixed), largest connected component, morphological
//! closing, and a centered-disk fallback when thresholding finds next to
//! nothing. Backgrounds are the input images with the masked region zeroed.

use crate::dataset::{BinaryMask, LongTailDataset};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// How to binarize the grayscale image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    Otsu,
    Fixed,
}

/// Knobs for the segmenter.
#[derive(Debug, Clone, Copy)]
pub struct SegmenterParams {
    pub threshold_mode: ThresholdMode,
    /// Threshold in (0, 1), used when `threshold_mode` is `Fixed`.
    pub fixed_threshold: f64,
    /// Below this foreground fraction the result is replaced by the
    /// centered-disk fallback.
    pub min_region_fraction: f64,
    /// Radius of the square structuring element for closing; 0 disables it.
    pub morphological_radius: usize,
}

impl Default for SegmenterParams {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Otsu,
            fixed_threshold: 0.5,
            min_region_fraction: 0.02,
            morphological_radius: 1,
        }
    }
}

impl SegmenterParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_region_fraction && self.min_region_fraction < 0.9) {
            return Err(Error::validation(format!(
                "min_region_fraction must be in (0, 0.9), got {}",
                self.min_region_fraction
            )));
        }
        if self.threshold_mode == ThresholdMode::Fixed
            && !(0.0 < self.fixed_threshold && self.fixed_threshold < 1.0)
        {
            return Err(Error::validation(format!(
                "fixed_threshold must be in (0, 1), got {}",
                self.fixed_threshold
            )));
        }
        Ok(())
    }
}

fn grayscale(image: &Tensor) -> Vec<f64> {
    let hw = image.h * image.w;
    let mut gray = vec![0.0; hw];
    for ch in 0..image.c {
        let plane = image.plane(0, ch);
        for (g, &v) in gray.iter_mut().zip(plane) {
            *g += v;
        }
    }
    for g in &mut gray {
        *g /= image.c as f64;
    }
    gray
}

/// Otsu's threshold over a 256-bin histogram. Returns `None` when the image
/// is constant, in which case no split separates anything.
fn otsu_threshold(gray: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &g in gray {
        let bin = ((g * BINS as f64) as usize).min(BINS - 1);
        hist[bin] += 1;
    }
    let total = gray.len() as f64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut best: Option<(f64, usize)> = None;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for (k, &count) in hist.iter().enumerate().take(BINS - 1) {
        w0 += count as f64;
        sum0 += k as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, k));
        }
    }
    best.filter(|&(var, _)| var > 0.0)
        .map(|(_, k)| (k + 1) as f64 / BINS as f64)
}

/// Keeps only the largest 8-connected component of the foreground.
fn largest_component(fg: &mut [bool], h: usize, w: usize) {
    let mut labels = vec![0u32; fg.len()];
    let mut next_label = 0u32;
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next_label += 1;
        let mut size = 0usize;
        stack.push(start);
        labels[start] = next_label;
        while let Some(idx) = stack.pop() {
            size += 1;
            let (y, x) = (idx / w, idx % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if fg[nidx] && labels[nidx] == 0 {
                        labels[nidx] = next_label;
                        stack.push(nidx);
                    }
                }
            }
        }
        if size > best_size {
            best_size = size;
            best_label = next_label;
        }
    }
    for (f, &l) in fg.iter_mut().zip(&labels) {
        *f = *f && l == best_label;
    }
}

fn dilate(fg: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as i64;
    let mut out = vec![false; fg.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0
                        && nx >= 0
                        && ny < h as i64
                        && nx < w as i64
                        && fg[ny as usize * w + nx as usize]
                    {
                        out[y as usize * w + x as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

fn erode(fg: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as i64;
    let mut out = vec![true; fg.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0
                        || nx < 0
                        || ny >= h as i64
                        || nx >= w as i64
                        || !fg[ny as usize * w + nx as usize]
                    {
                        out[y as usize * w + x as usize] = false;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

/// Centered disk covering roughly `area_fraction` of an h-by-w grid.
pub fn centered_disk_mask(h: usize, w: usize, area_fraction: f64) -> BinaryMask {
    let radius_sq = area_fraction * (h * w) as f64 / std::f64::consts::PI;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut t = Tensor::zeros(1, 1, h, w);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= radius_sq {
                t.data[y * w + x] = 1.0;
            }
        }
    }
    BinaryMask::from_tensor(t).expect("disk mask is binary by construction")
}

/// Segments the darker region of an image into a binary mask.
///
/// Pipeline: grayscale, threshold (foreground = darker side), largest
/// connected component, morphological closing. If the surviving foreground
/// covers less than `min_region_fraction` of the image, a centered disk over
/// 25% of the area is returned instead, so degenerate images still produce a
/// usable region.
pub fn segment(image: &Tensor, params: &SegmenterParams) -> Result<BinaryMask> {
    params.validate()?;
    if image.n != 1 {
        return Err(Error::validation(format!(
            "segment expects a single image, got batch of {}",
            image.n
        )));
    }
    let (h, w) = (image.h, image.w);
    let gray = grayscale(image);
    let threshold = match params.threshold_mode {
        ThresholdMode::Fixed => Some(params.fixed_threshold),
        ThresholdMode::Otsu => otsu_threshold(&gray),
    };
    let fallback = || centered_disk_mask(h, w, 0.25);
    let Some(threshold) = threshold else {
        return Ok(fallback());
    };
    let mut fg: Vec<bool> = gray.iter().map(|&g| g < threshold).collect();
    largest_component(&mut fg, h, w);
    if params.morphological_radius > 0 {
        let dilated = dilate(&fg, h, w, params.morphological_radius);
        fg = erode(&dilated, h, w, params.morphological_radius);
    }
    let fraction = fg.iter().filter(|&&b| b).count() as f64 / (h * w) as f64;
    if fraction < params.min_region_fraction {
        return Ok(fallback());
    }
    let mut t = Tensor::zeros(1, 1, h, w);
    for (v, &b) in t.data.iter_mut().zip(&fg) {
        *v = f64::from(b);
    }
    BinaryMask::from_tensor(t)
}

/// Zeroes the masked region of an image, leaving the rest untouched.
pub fn make_background(image: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let m = mask.as_tensor();
    if (m.h, m.w) != (image.h, image.w) {
        return Err(Error::validation(format!(
            "mask {}x{} does not match image {}x{}",
            m.h, m.w, image.h, image.w
        )));
    }
    let mut out = image.clone();
    for n in 0..image.n {
        for ch in 0..image.c {
            let plane = out.plane_mut(n, ch);
            for (v, &mv) in plane.iter_mut().zip(&m.data) {
                *v *= 1.0 - mv;
            }
        }
    }
    Ok(out)
}

/// Downsamples a mask by an integer factor, taking the top-left pixel of
/// each block so the result stays binary.
pub fn rescale_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    let m = mask.as_tensor();
    if factor == 0 {
        return Err(Error::validation("rescale factor must be >= 1"));
    }
    if m.h % factor != 0 || m.w % factor != 0 {
        return Err(Error::validation(format!(
            "mask {}x{} is not divisible by factor {}",
            m.h, m.w, factor
        )));
    }
    let (oh, ow) = (m.h / factor, m.w / factor);
    let mut t = Tensor::zeros(1, 1, oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            t.data[y * ow + x] = m.data[y * factor * m.w + x * factor];
        }
    }
    BinaryMask::from_tensor(t)
}

/// Fills in missing masks and derives backgrounds for every sample in place.
pub fn prepare_dataset(dataset: &mut LongTailDataset, params: &SegmenterParams) -> Result<()> {
    for sample in &mut dataset.samples {
        if sample.mask.is_none() {
            sample.mask = Some(segment(&sample.image, params)?);
        }
        let mask = sample.mask.as_ref().unwrap();
        sample.background = Some(make_background(&sample.image, mask)?);
        sample.validate()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk_image(h: usize, w: usize, radius: f64, fg_val: f64, bg_val: f64) -> (Tensor, Tensor) {
        let mut image = Tensor::zeros(1, 3, h, w);
        let mut truth = Tensor::zeros(1, 1, h, w);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let inside = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= radius * radius;
                if inside {
                    truth.data[y * w + x] = 1.0;
                }
                for ch in 0..3 {
                    image.plane_mut(0, ch)[y * w + x] = if inside { fg_val } else { bg_val };
                }
            }
        }
        (image, truth)
    }

    fn iou(a: &Tensor, b: &Tensor) -> f64 {
        let mut inter = 0.0;
        let mut union = 0.0;
        for (&x, &y) in a.data.iter().zip(&b.data) {
            if x == 1.0 || y == 1.0 {
                union += 1.0;
            }
            if x == 1.0 && y == 1.0 {
                inter += 1.0;
            }
        }
        inter / union
    }

    #[test]
    fn dark_disk_is_recovered() {
        let (image, truth) = disk_image(16, 16, 4.5, 0.2, 0.85);
        let mask = segment(&image, &SegmenterParams::default()).unwrap();
        assert!(iou(mask.as_tensor(), &truth) >= 0.9);
    }

    #[test]
    fn noisy_disk_is_recovered() {
        let (mut image, truth) = disk_image(16, 16, 4.5, 0.25, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in &mut image.data {
            *v = (*v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        let mask = segment(&image, &SegmenterParams::default()).unwrap();
        assert!(iou(mask.as_tensor(), &truth) >= 0.9);
    }

    #[test]
    fn constant_image_falls_back_to_centered_disk() {
        let mut image = Tensor::zeros(1, 3, 16, 16);
        image.fill(1.0);
        let mask = segment(&image, &SegmenterParams::default()).unwrap();
        let expected = centered_disk_mask(16, 16, 0.25);
        assert_eq!(mask.as_tensor().data, expected.as_tensor().data);
        let frac = mask.area_fraction();
        assert!((0.18..=0.32).contains(&frac), "fraction {}", frac);
    }

    #[test]
    fn tiny_speck_falls_back() {
        let mut image = Tensor::zeros(1, 3, 16, 16);
        image.fill(0.9);
        for ch in 0..3 {
            image.plane_mut(0, ch)[0] = 0.0;
        }
        let params = SegmenterParams {
            min_region_fraction: 0.05,
            morphological_radius: 0,
            ..SegmenterParams::default()
        };
        let mask = segment(&image, &params).unwrap();
        let expected = centered_disk_mask(16, 16, 0.25);
        assert_eq!(mask.as_tensor().data, expected.as_tensor().data);
    }

    #[test]
    fn only_largest_component_survives() {
        let mut image = Tensor::zeros(1, 3, 16, 16);
        image.fill(0.9);
        for y in 2..9 {
            for x in 2..9 {
                for ch in 0..3 {
                    image.plane_mut(0, ch)[y * 16 + x] = 0.1;
                }
            }
        }
        for ch in 0..3 {
            image.plane_mut(0, ch)[15 * 16 + 15] = 0.1;
            image.plane_mut(0, ch)[15 * 16 + 14] = 0.1;
        }
        let params = SegmenterParams {
            morphological_radius: 0,
            ..SegmenterParams::default()
        };
        let mask = segment(&image, &params).unwrap();
        assert_eq!(mask.as_tensor().data[15 * 16 + 15], 0.0);
        assert_eq!(mask.as_tensor().data[5 * 16 + 5], 1.0);
        assert_eq!(mask.ones_count(), 49);
    }

    #[test]
    fn closing_fills_pinholes() {
        let (mut image, _) = disk_image(16, 16, 5.0, 0.2, 0.85);
        for ch in 0..3 {
            image.plane_mut(0, ch)[7 * 16 + 7] = 0.85;
        }
        let mask = segment(&image, &SegmenterParams::default()).unwrap();
        assert_eq!(mask.as_tensor().data[7 * 16 + 7], 1.0);
    }

    #[test]
    fn background_identity_and_annihilation() {
        let (image, _) = disk_image(8, 8, 2.5, 0.3, 0.7);
        let zeros = BinaryMask::from_tensor(Tensor::zeros(1, 1, 8, 8)).unwrap();
        let bg = make_background(&image, &zeros).unwrap();
        assert_eq!(bg.data, image.data);

        let mut ones = Tensor::zeros(1, 1, 8, 8);
        ones.fill(1.0);
        let ones = BinaryMask::from_tensor(ones).unwrap();
        let bg = make_background(&image, &ones).unwrap();
        assert!(bg.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_zeroes_exactly_the_masked_half() {
        let (image, _) = disk_image(8, 8, 2.5, 0.3, 0.7);
        let mut half = Tensor::zeros(1, 1, 8, 8);
        for y in 0..4 {
            for x in 0..8 {
                half.data[y * 8 + x] = 1.0;
            }
        }
        let mask = BinaryMask::from_tensor(half).unwrap();
        let bg = make_background(&image, &mask).unwrap();
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let got = bg.plane(0, ch)[y * 8 + x];
                    let want = if y < 4 { 0.0 } else { image.plane(0, ch)[y * 8 + x] };
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn background_rejects_shape_mismatch() {
        let (image, _) = disk_image(8, 8, 2.5, 0.3, 0.7);
        let mask = BinaryMask::from_tensor(Tensor::zeros(1, 1, 4, 4)).unwrap();
        assert!(make_background(&image, &mask).is_err());
    }

    #[test]
    fn rescale_checkerboard_takes_top_left() {
        let mut t = Tensor::zeros(1, 1, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                t.data[y * 4 + x] = ((y + x) % 2) as f64;
            }
        }
        let mask = BinaryMask::from_tensor(t).unwrap();
        let small = rescale_mask(&mask, 2).unwrap();
        assert_eq!(small.as_tensor().data, vec![0.0, 0.0, 0.0, 0.0]);

        let mut shifted = Tensor::zeros(1, 1, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                shifted.data[y * 4 + x] = ((y + x + 1) % 2) as f64;
            }
        }
        let mask = BinaryMask::from_tensor(shifted).unwrap();
        let small = rescale_mask(&mask, 2).unwrap();
        assert_eq!(small.as_tensor().data, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn rescale_identity_and_errors() {
        let mut t = Tensor::zeros(1, 1, 4, 4);
        t.data[3] = 1.0;
        let mask = BinaryMask::from_tensor(t).unwrap();
        let same = rescale_mask(&mask, 1).unwrap();
        assert_eq!(same.as_tensor().data, mask.as_tensor().data);
        assert!(rescale_mask(&mask, 3).is_err());
        assert!(rescale_mask(&mask, 0).is_err());
    }

    proptest! {
        #[test]
        fn segment_is_binary_and_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut image = Tensor::zeros(1, 3, 12, 12);
            for v in &mut image.data {
                *v = rng.random_range(0.0..1.0);
            }
            let params = SegmenterParams::default();
            let a = segment(&image, &params).unwrap();
            let b = segment(&image, &params).unwrap();
            prop_assert_eq!(a.as_tensor().data.clone(), b.as_tensor().data.clone());
            prop_assert!(a.as_tensor().data.iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn rescaled_masks_stay_binary(seed in 0u64..200, factor in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let side = factor * 4;
            let mut t = Tensor::zeros(1, 1, side, side);
            for v in &mut t.data {
                *v = f64::from(rng.random_range(0..2) == 1);
            }
            let mask = BinaryMask::from_tensor(t).unwrap();
            let small = rescale_mask(&mask, factor).unwrap();
            prop_assert_eq!(small.as_tensor().h, 4);
            prop_assert!(small.as_tensor().data.iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn background_matches_image_off_mask(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut image = Tensor::zeros(1, 3, 8, 8);
            for v in &mut image.data {
                *v = rng.random_range(0.0..1.0);
            }
            let mut m = Tensor::zeros(1, 1, 8, 8);
            for v in &mut m.data {
                *v = f64::from(rng.random_range(0..2) == 1);
            }
            let mask = BinaryMask::from_tensor(m).unwrap();
            let bg = make_background(&image, &mask).unwrap();
            for ch in 0..3 {
                for idx in 0..64 {
                    if mask.as_tensor().data[idx] == 0.0 {
                        prop_assert_eq!(bg.plane(0, ch)[idx], image.plane(0, ch)[idx]);
                    } else {
                        prop_assert_eq!(bg.plane(0, ch)[idx], 0.0);
                    }
                }
            }
        }
    }
}
