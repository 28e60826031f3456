//! Baseline convolutional classifier.
//!
//! Deliberately vanilla: three conv stages, global average pooling, one
//! linear head, plain cross-entropy. The only augmentation is a random
//! horizontal flip, applied the same way whether the train set is real
//! images alone or real plus synthetic. Any gain the pipeline shows has to
//! come from the data, not the classifier.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::container;
use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Adam, Conv2d, Linear, Param, Silu, Tensor};
use crate::selection::read_param;

pub const CLASSIFIER_KIND: &str = "classifier";

pub struct Classifier {
    num_classes: usize,
    channels: usize,
    conv1: Conv2d,
    act1: Silu,
    conv2: Conv2d,
    act2: Silu,
    conv3: Conv2d,
    act3: Silu,
    head: Linear,
    pooled_hw: Option<(usize, usize)>,
    trained: bool,
}

fn global_average_pool(x: &Tensor) -> Vec<f64> {
    let area = (x.h * x.w) as f64;
    let mut out = vec![0.0; x.n * x.c];
    for n in 0..x.n {
        for c in 0..x.c {
            out[n * x.c + c] = x.plane(n, c).iter().sum::<f64>() / area;
        }
    }
    out
}

fn global_average_pool_backward(d_pool: &[f64], n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let area = (h * w) as f64;
    let mut dx = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let g = d_pool[ni * c + ci] / area;
            dx.plane_mut(ni, ci).fill(g);
        }
    }
    dx
}

impl Classifier {
    pub fn new(num_classes: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            num_classes,
            channels,
            conv1: Conv2d::new(3, channels, 1, rng),
            act1: Silu::default(),
            conv2: Conv2d::new(channels, 2 * channels, 2, rng),
            act2: Silu::default(),
            conv3: Conv2d::new(2 * channels, 2 * channels, 2, rng),
            act3: Silu::default(),
            head: Linear::new(2 * channels, num_classes, rng),
            pooled_hw: None,
            trained: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        if images.c != 3 {
            return Err(Error::validation(format!(
                "classifier expects 3-channel images, got {}",
                images.c
            )));
        }
        if images.h < 4 || images.w < 4 {
            return Err(Error::validation(format!(
                "images of {}x{} are too small to classify",
                images.h, images.w
            )));
        }
        Ok(())
    }

    /// Raw logits, one row of `num_classes` values per image.
    pub fn logits(&self, images: &Tensor) -> Result<Vec<f64>> {
        self.check_images(images)?;
        let mut h = self.conv1.forward_no_cache(images);
        Silu::forward_no_cache(&mut h.data);
        let mut h = self.conv2.forward_no_cache(&h);
        Silu::forward_no_cache(&mut h.data);
        let mut h = self.conv3.forward_no_cache(&h);
        Silu::forward_no_cache(&mut h.data);
        let pooled = global_average_pool(&h);
        Ok(self.head.forward_no_cache(&pooled, images.n))
    }

    fn forward_train(&mut self, images: &Tensor) -> Vec<f64> {
        let mut h = self.conv1.forward(images);
        self.act1.forward(&mut h.data);
        let mut h = self.conv2.forward(&h);
        self.act2.forward(&mut h.data);
        let mut h = self.conv3.forward(&h);
        self.act3.forward(&mut h.data);
        self.pooled_hw = Some((h.h, h.w));
        let pooled = global_average_pool(&h);
        self.head.forward(&pooled, images.n)
    }

    fn backward_train(&mut self, d_logits: &[f64], n: usize) {
        let (h, w) = self.pooled_hw.expect("backward before forward");
        let d_pool = self.head.backward(d_logits);
        let mut dh = global_average_pool_backward(&d_pool, n, 2 * self.channels, h, w);
        self.act3.backward(&mut dh.data);
        let mut dh = self.conv3.backward(&dh, true).expect("need dx");
        self.act2.backward(&mut dh.data);
        let mut dh = self.conv2.backward(&dh, true).expect("need dx");
        self.act1.backward(&mut dh.data);
        self.conv1.backward(&dh, false);
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let [w1, b1] = self.conv1.params_mut();
        let [w2, b2] = self.conv2.params_mut();
        let [w3, b3] = self.conv3.params_mut();
        let [wh, bh] = self.head.params_mut();
        vec![w1, b1, w2, b2, w3, b3, wh, bh]
    }

    fn param_blocks(&self) -> Vec<(&'static str, &Param)> {
        let [w1, b1] = self.conv1.params();
        let [w2, b2] = self.conv2.params();
        let [w3, b3] = self.conv3.params();
        let [wh, bh] = self.head.params();
        vec![
            ("conv1.weight", w1),
            ("conv1.bias", b1),
            ("conv2.weight", w2),
            ("conv2.bias", b2),
            ("conv3.weight", w3),
            ("conv3.bias", b3),
            ("head.weight", wh),
            ("head.bias", bh),
        ]
    }

    /// Cross-entropy training over uniformly drawn batches with random
    /// horizontal flips. Returns the training accuracy over the full train
    /// set after the final step.
    pub fn train(
        &mut self,
        samples: &[&LabeledSample],
        steps: usize,
        batch_size: usize,
        learning_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::validation("cannot train a classifier on zero samples"));
        }
        if batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        for s in samples {
            if s.label >= self.num_classes {
                return Err(Error::validation(format!(
                    "sample '{}' has label {} but the classifier has {} classes",
                    s.sample_id, s.label, self.num_classes
                )));
            }
        }
        let mut adam = Adam::new(learning_rate);
        for step in 0..steps {
            let mut batch_images = Vec::with_capacity(batch_size);
            let mut labels = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                let s = samples[rng.random_range(0..samples.len())];
                let image = if rng.random_bool(0.5) {
                    s.image.flipped_horizontal()
                } else {
                    s.image.clone()
                };
                batch_images.push(image);
                labels.push(s.label);
            }
            let refs: Vec<&Tensor> = batch_images.iter().collect();
            let x = Tensor::stack(&refs);
            self.check_images(&x)?;
            let logits = self.forward_train(&x);
            let (loss, d_logits) =
                softmax_cross_entropy(&logits, batch_size, self.num_classes, &labels);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: "classifier loss diverged".into(),
                });
            }
            self.backward_train(&d_logits, batch_size);
            adam.step(&mut self.params_mut());
            for p in self.params_mut() {
                p.zero_grad();
            }
        }
        self.trained = true;
        let mut correct = 0usize;
        for chunk in samples.chunks(64) {
            let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let preds = self.predict(&Tensor::stack(&images))?;
            correct += preds
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.label)
                .count();
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Argmax over logits; ties go to the lowest class index.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(argmax_rows(&logits, images.n, self.num_classes))
    }

    /// Predictions for a sample list, batched internally, in input order.
    pub fn predict_samples(&self, samples: &[&LabeledSample]) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            preds.extend(self.predict(&Tensor::stack(&images))?);
        }
        Ok(preds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blocks: Vec<(&str, &[f64])> = self
            .param_blocks()
            .into_iter()
            .map(|(name, p)| (name, p.value.as_slice()))
            .collect();
        container::save_checkpoint(
            path,
            CLASSIFIER_KIND,
            json!({
                "num_classes": self.num_classes,
                "channels": self.channels,
                "trained": self.trained,
            }),
            &blocks,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = container::load_checkpoint(path)?;
        ck.expect_kind(CLASSIFIER_KIND)?;
        let get = |k: &str| {
            ck.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::State(format!("classifier checkpoint missing '{}'", k)))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut clf = Self::new(get("num_classes")?, get("channels")?, &mut rng);
        clf.trained = ck.meta["trained"].as_bool().unwrap_or(false);
        let names: Vec<&'static str> = clf.param_blocks().iter().map(|(n, _)| *n).collect();
        for (name, p) in names.iter().zip(clf.params_mut()) {
            read_param(&ck, name, p)?;
        }
        Ok(clf)
    }
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(values: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn striped_sample(seed: u64, label: usize, hw: usize) -> LabeledSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = Tensor::zeros(1, 3, hw, hw);
        for c in 0..3 {
            let plane = image.plane_mut(0, c);
            for y in 0..hw {
                for x in 0..hw {
                    // Per-label orientation and phase make classes separable.
                    let v: f64 = match label {
                        0 => 0.8,
                        1 => {
                            if y % 2 == 0 {
                                0.8
                            } else {
                                0.2
                            }
                        }
                        2 => {
                            if x % 2 == 0 {
                                0.8
                            } else {
                                0.2
                            }
                        }
                        _ => {
                            if (x + y) % 2 == 0 {
                                0.8
                            } else {
                                0.2
                            }
                        }
                    };
                    plane[y * hw + x] = (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
                }
            }
        }
        LabeledSample {
            sample_id: format!("c{label}s{seed}"),
            image,
            label,
            mask: None,
            background: None,
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_low_index() {
        assert_eq!(argmax_rows(&[0.0, 0.0, 0.0], 1, 3), vec![0]);
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0], 1, 3), vec![1]);
        assert_eq!(argmax_rows(&[1.0, 0.0, 2.0, 2.0], 2, 2), vec![0, 0]);
    }

    proptest! {
        #[test]
        fn argmax_ignores_constant_shifts(
            row in proptest::collection::vec(-10.0f64..10.0, 4),
            shift in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            prop_assert_eq!(argmax_rows(&row, 1, 4), argmax_rows(&shifted, 1, 4));
        }
    }

    #[test]
    fn single_class_training_is_perfect() {
        let samples: Vec<LabeledSample> = (0..6).map(|i| striped_sample(i, 2, 8)).collect();
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut clf = Classifier::new(4, 4, &mut rng);
        let acc = clf.train(&refs, 60, 4, 2e-3, &mut rng).unwrap();
        assert_eq!(acc, 1.0);
        let preds = clf.predict_samples(&refs).unwrap();
        assert!(preds.iter().all(|&p| p == 2));
    }

    #[test]
    fn zero_steps_keeps_the_initialization() {
        let samples: Vec<LabeledSample> = (0..4).map(|i| striped_sample(i, 0, 8)).collect();
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let mut clf = Classifier::new(3, 4, &mut ChaCha8Rng::seed_from_u64(6));
        clf.train(&refs, 0, 2, 1e-3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let fresh = Classifier::new(3, 4, &mut ChaCha8Rng::seed_from_u64(6));
        for ((_, a), (_, b)) in clf.param_blocks().iter().zip(fresh.param_blocks()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn learns_to_separate_four_stripe_classes() {
        let mut samples = Vec::new();
        let mut seed = 0u64;
        for label in 0..4 {
            for _ in 0..8 {
                samples.push(striped_sample(seed, label, 8));
                seed += 1;
            }
        }
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut clf = Classifier::new(4, 6, &mut rng);
        let acc = clf.train(&refs, 300, 8, 2e-3, &mut rng).unwrap();
        assert!(acc > 0.9, "training accuracy {acc}");
    }

    #[test]
    fn training_leaves_input_samples_untouched() {
        let samples: Vec<LabeledSample> = (0..4).map(|i| striped_sample(i, (i % 2) as usize, 8)).collect();
        let before: Vec<Vec<f64>> = samples.iter().map(|s| s.image.data.clone()).collect();
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut clf = Classifier::new(2, 4, &mut rng);
        clf.train(&refs, 20, 4, 1e-3, &mut rng).unwrap();
        for (s, b) in samples.iter().zip(&before) {
            assert_eq!(&s.image.data, b);
        }
    }

    #[test]
    fn rejects_out_of_range_labels_and_bad_shapes() {
        let samples: Vec<LabeledSample> = vec![striped_sample(0, 5, 8)];
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut clf = Classifier::new(4, 4, &mut rng);
        assert!(clf.train(&refs, 1, 1, 1e-3, &mut rng).is_err());
        assert!(clf.predict(&Tensor::zeros(1, 1, 8, 8)).is_err());
        assert!(clf.predict(&Tensor::zeros(1, 3, 2, 2)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let samples: Vec<LabeledSample> = (0..8).map(|i| striped_sample(i, (i % 2) as usize, 8)).collect();
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut clf = Classifier::new(2, 4, &mut rng);
        clf.train(&refs, 40, 4, 2e-3, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ck");
        clf.save(&path).unwrap();
        let loaded = Classifier::load(&path).unwrap();
        assert!(loaded.is_trained());
        assert_eq!(
            clf.predict_samples(&refs).unwrap(),
            loaded.predict_samples(&refs).unwrap()
        );
        for ((_, a), (_, b)) in clf.param_blocks().iter().zip(loaded.param_blocks()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn repeated_prediction_is_deterministic() {
        let samples: Vec<LabeledSample> = (0..4).map(|i| striped_sample(i, 1, 8)).collect();
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let clf = Classifier::new(3, 4, &mut ChaCha8Rng::seed_from_u64(7));
        let a = clf.predict_samples(&refs).unwrap();
        let b = clf.predict_samples(&refs).unwrap();
        assert_eq!(a, b);
    }
}
