//! Anomaly-guided sample weighting and oversampling.
//!
//! Each tail class gets its own small convolutional autoencoder trained on
//! that class's images. Reconstruction error is the anomaly score; weights
//! fall off exponentially with distance from the class median score, so
//! typical samples are drawn more often when the class is inflated to the
//! head-class size.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::container::{self, Checkpoint};
use crate::dataset::LongTailDataset;
use crate::error::{Error, Result};
use crate::nn::{mse_with_grad, upsample2x, upsample2x_backward, Adam, Conv2d, Param, SigmoidLayer, Silu, Tensor};

/// Convolutional autoencoder: two stride-2 encoder convs, two
/// upsample-and-conv decoder stages, sigmoid output. Requires image sides
/// divisible by 4.
struct ScorerNet {
    enc1: Conv2d,
    act1: Silu,
    enc2: Conv2d,
    act2: Silu,
    dec1: Conv2d,
    act3: Silu,
    dec2: Conv2d,
    out: SigmoidLayer,
}

impl ScorerNet {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            enc1: Conv2d::new(3, channels, 2, rng),
            act1: Silu::default(),
            enc2: Conv2d::new(channels, channels, 2, rng),
            act2: Silu::default(),
            dec1: Conv2d::new(channels, channels, 1, rng),
            act3: Silu::default(),
            dec2: Conv2d::new(channels, 3, 1, rng),
            out: SigmoidLayer::default(),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut h = self.enc1.forward(x);
        self.act1.forward(&mut h.data);
        let mut h = self.enc2.forward(&h);
        self.act2.forward(&mut h.data);
        let mut h = self.dec1.forward(&upsample2x(&h));
        self.act3.forward(&mut h.data);
        let mut y = self.dec2.forward(&upsample2x(&h));
        self.out.forward(&mut y.data);
        y
    }

    fn forward_no_cache(&self, x: &Tensor) -> Tensor {
        let mut h = self.enc1.forward_no_cache(x);
        Silu::forward_no_cache(&mut h.data);
        let mut h = self.enc2.forward_no_cache(&h);
        Silu::forward_no_cache(&mut h.data);
        let mut h = self.dec1.forward_no_cache(&upsample2x(&h));
        Silu::forward_no_cache(&mut h.data);
        let mut y = self.dec2.forward_no_cache(&upsample2x(&h));
        SigmoidLayer::forward_no_cache(&mut y.data);
        y
    }

    fn backward(&mut self, mut dy: Tensor) {
        self.out.backward(&mut dy.data);
        let dy = self.dec2.backward(&dy, true).expect("need input grad");
        let mut dy = upsample2x_backward(&dy);
        self.act3.backward(&mut dy.data);
        let dy = self.dec1.backward(&dy, true).expect("need input grad");
        let mut dy = upsample2x_backward(&dy);
        self.act2.backward(&mut dy.data);
        let dy = self.enc2.backward(&dy, true).expect("need input grad");
        let mut dy = dy;
        self.act1.backward(&mut dy.data);
        self.enc1.backward(&dy, false);
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let [w1, b1] = self.enc1.params_mut();
        let [w2, b2] = self.enc2.params_mut();
        let [w3, b3] = self.dec1.params_mut();
        let [w4, b4] = self.dec2.params_mut();
        vec![w1, b1, w2, b2, w3, b3, w4, b4]
    }

    fn param_blocks(&self) -> Vec<(&'static str, &Param)> {
        let [w1, b1] = self.enc1.params();
        let [w2, b2] = self.enc2.params();
        let [w3, b3] = self.dec1.params();
        let [w4, b4] = self.dec2.params();
        vec![
            ("enc1.weight", w1),
            ("enc1.bias", b1),
            ("enc2.weight", w2),
            ("enc2.bias", b2),
            ("dec1.weight", w3),
            ("dec1.bias", b3),
            ("dec2.weight", w4),
            ("dec2.bias", b4),
        ]
    }
}

/// Mean squared difference between an image and its reconstruction.
pub fn reconstruction_error(original: &Tensor, reconstruction: &Tensor) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in original.data.iter().zip(&reconstruction.data) {
        let d = a - b;
        acc += d * d;
    }
    acc / original.data.len() as f64
}

/// Per-class anomaly scorer backed by a reconstruction autoencoder.
pub struct AnomalyScorer {
    pub class: usize,
    channels: usize,
    net: ScorerNet,
    trained: bool,
}

impl AnomalyScorer {
    pub fn new(class: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            class,
            channels,
            net: ScorerNet::new(channels, rng),
            trained: false,
        }
    }

    /// Trains the autoencoder on the given images with Adam on pixel MSE.
    /// Returns the mean loss over the final quarter of steps.
    pub fn train(
        &mut self,
        images: &[&Tensor],
        steps: usize,
        batch_size: usize,
        learning_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::validation("cannot train a scorer on zero images"));
        }
        for im in images {
            check_image_shape(im)?;
        }
        let mut adam = Adam::new(learning_rate);
        let mut tail_losses = Vec::new();
        let tail_start = steps - steps / 4;
        for step in 0..steps {
            let batch: Vec<&Tensor> = (0..batch_size)
                .map(|_| images[rng.random_range(0..images.len())])
                .collect();
            let x = Tensor::stack(&batch);
            let recon = self.net.forward(&x);
            let (loss, grad) = mse_with_grad(&recon, &x);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("scorer loss diverged for class {}", self.class),
                });
            }
            self.net.backward(grad);
            adam.step(&mut self.net.params_mut());
            for p in self.net.params_mut() {
                p.zero_grad();
            }
            if step >= tail_start {
                tail_losses.push(loss);
            }
        }
        self.trained = true;
        Ok(if tail_losses.is_empty() {
            f64::NAN
        } else {
            tail_losses.iter().sum::<f64>() / tail_losses.len() as f64
        })
    }

    /// Reconstruction error of one image.
    pub fn score(&self, image: &Tensor) -> Result<f64> {
        if !self.trained {
            return Err(Error::State(format!(
                "scorer for class {} has not been trained",
                self.class
            )));
        }
        check_image_shape(image)?;
        let recon = self.net.forward_no_cache(image);
        Ok(reconstruction_error(image, &recon))
    }

    /// Scores each image independently, in order.
    pub fn score_class(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        images.iter().map(|im| self.score(im)).collect()
    }

    pub(crate) fn param_values(&self) -> Vec<&[f64]> {
        self.net
            .param_blocks()
            .into_iter()
            .map(|(_, p)| p.value.as_slice())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blocks: Vec<(&str, &[f64])> = self
            .net
            .param_blocks()
            .into_iter()
            .map(|(name, p)| (name, p.value.as_slice()))
            .collect();
        container::save_checkpoint(
            path,
            "anomaly-scorer",
            json!({"class": self.class, "channels": self.channels, "trained": self.trained}),
            &blocks,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = container::load_checkpoint(path)?;
        ck.expect_kind("anomaly-scorer")?;
        let class = meta_usize(&ck, "class")?;
        let channels = meta_usize(&ck, "channels")?;
        let trained = ck.meta["trained"].as_bool().unwrap_or(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut scorer = Self::new(class, channels, &mut rng);
        for (name, param) in scorer.net.param_blocks_mut() {
            read_param(&ck, name, param)?;
        }
        scorer.trained = trained;
        Ok(scorer)
    }
}

impl ScorerNet {
    fn param_blocks_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let [w1, b1] = self.enc1.params_mut();
        let [w2, b2] = self.enc2.params_mut();
        let [w3, b3] = self.dec1.params_mut();
        let [w4, b4] = self.dec2.params_mut();
        vec![
            ("enc1.weight", w1),
            ("enc1.bias", b1),
            ("enc2.weight", w2),
            ("enc2.bias", b2),
            ("dec1.weight", w3),
            ("dec1.bias", b3),
            ("dec2.weight", w4),
            ("dec2.bias", b4),
        ]
    }
}

/// Copies a checkpoint block into a parameter, checking lengths.
pub fn read_param(ck: &Checkpoint, name: &str, param: &mut Param) -> Result<()> {
    let block = ck.block(name)?;
    if block.len() != param.value.len() {
        return Err(Error::State(format!(
            "block '{}' has {} values, expected {}",
            name,
            block.len(),
            param.value.len()
        )));
    }
    param.value.copy_from_slice(block);
    Ok(())
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta[key]
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::State(format!("checkpoint meta is missing '{}'", key)))
}

fn check_image_shape(image: &Tensor) -> Result<()> {
    if image.c != 3 || image.h % 4 != 0 || image.w % 4 != 0 {
        return Err(Error::validation(format!(
            "scorer needs 3-channel images with sides divisible by 4, got {}x{}x{}",
            image.c, image.h, image.w
        )));
    }
    Ok(())
}

/// Median with the even-length mean-of-middle-two convention.
pub fn median_anchor(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::validation("median of an empty score list"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// Weight exp(-|anchor - score|), always in (0, 1], peaking at the anchor.
pub fn aid_weight(score: f64, anchor: f64) -> Result<f64> {
    if !score.is_finite() || !anchor.is_finite() {
        return Err(Error::validation(format!(
            "weight inputs must be finite, got score {} anchor {}",
            score, anchor
        )));
    }
    Ok((-(anchor - score).abs()).exp())
}

/// Inflates one class to `target` samples: every index once, then
/// weighted draws with replacement for the remainder.
pub fn oversample(
    indices: &[usize],
    weights: &[f64],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if indices.len() != weights.len() {
        return Err(Error::validation(format!(
            "{} indices but {} weights",
            indices.len(),
            weights.len()
        )));
    }
    if target < indices.len() {
        return Err(Error::validation(format!(
            "target {} is below the class size {}",
            target,
            indices.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::validation("weights must be positive and finite"));
    }
    let mut result = indices.to_vec();
    if target > indices.len() {
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::validation(format!("bad weight distribution: {}", e)))?;
        for _ in 0..target - indices.len() {
            result.push(indices[dist.sample(rng)]);
        }
    }
    Ok(result)
}

/// One scored sample in the weight table.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub sample_id: String,
    pub class: usize,
    pub score: f64,
    pub weight: f64,
}

/// Scores, anchors, and weights for every non-head class, plus the
/// oversampling target (the head-class count).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeightTable {
    pub target: usize,
    pub rows: Vec<WeightRow>,
}

impl ClassWeightTable {
    /// Median anchor per class, recomputed from the stored scores.
    pub fn anchors(&self) -> Result<BTreeMap<usize, f64>> {
        let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            by_class.entry(row.class).or_default().push(row.score);
        }
        by_class
            .into_iter()
            .map(|(class, scores)| Ok((class, median_anchor(&scores)?)))
            .collect()
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id\tclass\tscore\tweight\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                row.sample_id, row.class, row.score, row.weight
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a table and validates it against the dataset: every non-head
    /// sample has exactly one row with a matching class.
    pub fn load_tsv(path: &Path, dataset: &LongTailDataset) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line != "sample_id\tclass\tscore\tweight" {
                    return Err(Error::Load {
                        path: path.to_path_buf(),
                        msg: format!("unexpected header: {}", line),
                    });
                }
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    msg: format!("line {}: expected 4 fields, got {}", lineno + 1, parts.len()),
                });
            }
            let parse_err = |what: &str| Error::Load {
                path: path.to_path_buf(),
                msg: format!("line {}: bad {}", lineno + 1, what),
            };
            rows.push(WeightRow {
                sample_id: parts[0].to_string(),
                class: parts[1].parse().map_err(|_| parse_err("class"))?,
                score: parts[2].parse().map_err(|_| parse_err("score"))?,
                weight: parts[3].parse().map_err(|_| parse_err("weight"))?,
            });
        }
        let table = Self {
            target: dataset.head_count(),
            rows,
        };
        table.validate_against(dataset)?;
        Ok(table)
    }

    fn validate_against(&self, dataset: &LongTailDataset) -> Result<()> {
        let mut by_id: BTreeMap<&str, &WeightRow> = BTreeMap::new();
        for row in &self.rows {
            if by_id.insert(row.sample_id.as_str(), row).is_some() {
                return Err(Error::validation(format!(
                    "duplicate weight row for sample {}",
                    row.sample_id
                )));
            }
        }
        for sample in &dataset.samples {
            if sample.label == 0 {
                continue;
            }
            let row = by_id.remove(sample.sample_id.as_str()).ok_or_else(|| {
                Error::validation(format!("no weight row for sample {}", sample.sample_id))
            })?;
            if row.class != sample.label {
                return Err(Error::validation(format!(
                    "sample {} has class {} in the table but label {} in the dataset",
                    sample.sample_id, row.class, sample.label
                )));
            }
        }
        if let Some((id, _)) = by_id.into_iter().next() {
            return Err(Error::validation(format!(
                "weight row for unknown sample {}",
                id
            )));
        }
        Ok(())
    }
}

/// Scores every non-head class with its scorer and derives weights.
///
/// With `standardize` set, scores are first shifted and scaled to zero mean
/// and unit variance within each class, which makes the weight spread
/// independent of the raw error scale. The stored score column is the value
/// the weight was computed from.
pub fn build_weight_table(
    dataset: &LongTailDataset,
    scorers: &BTreeMap<usize, AnomalyScorer>,
    standardize: bool,
) -> Result<ClassWeightTable> {
    let mut rows = Vec::new();
    for class in 1..dataset.num_classes {
        let scorer = scorers.get(&class).ok_or_else(|| {
            Error::State(format!("no scorer provided for class {}", class))
        })?;
        if scorer.class != class {
            return Err(Error::State(format!(
                "scorer trained for class {} used for class {}",
                scorer.class, class
            )));
        }
        let indices = dataset.indices_of_class(class);
        let images: Vec<&Tensor> = indices.iter().map(|&i| &dataset.samples[i].image).collect();
        let mut scores = scorer.score_class(&images)?;
        if standardize {
            standardize_in_place(&mut scores);
        }
        let anchor = median_anchor(&scores)?;
        for (&idx, &score) in indices.iter().zip(&scores) {
            rows.push(WeightRow {
                sample_id: dataset.samples[idx].sample_id.clone(),
                class,
                score,
                weight: aid_weight(score, anchor)?,
            });
        }
    }
    Ok(ClassWeightTable {
        target: dataset.head_count(),
        rows,
    })
}

fn standardize_in_place(scores: &mut [f64]) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for s in scores.iter_mut() {
        *s = if sd > 0.0 { (*s - mean) / sd } else { 0.0 };
    }
}

/// Builds the full fine-tuning multiset: head-class samples once, every
/// other class inflated to the head count with weighted draws.
pub fn oversample_all(
    dataset: &LongTailDataset,
    table: &ClassWeightTable,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    table.validate_against(dataset)?;
    let target = dataset.head_count();
    let mut weight_by_id: BTreeMap<&str, f64> = BTreeMap::new();
    for row in &table.rows {
        weight_by_id.insert(row.sample_id.as_str(), row.weight);
    }
    let mut multiset = Vec::new();
    for class in 0..dataset.num_classes {
        let indices = dataset.indices_of_class(class);
        if class == 0 {
            multiset.extend_from_slice(&indices);
            continue;
        }
        let weights: Vec<f64> = indices
            .iter()
            .map(|&i| weight_by_id[dataset.samples[i].sample_id.as_str()])
            .collect();
        multiset.extend(oversample(&indices, &weights, target, rng)?);
    }
    Ok(multiset)
}
