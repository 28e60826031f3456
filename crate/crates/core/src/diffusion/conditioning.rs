//! Class conditioning: learned label embeddings and fixed timestep features.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Param, Silu};

/// Two-layer MLP mapping one-hot labels to an embedding vector that is
/// added to the timestep embedding inside the denoiser. These are the
/// jointly trained conditioning parameters.
pub struct ClassEmbedding {
    num_classes: usize,
    dim: usize,
    l1: Linear,
    act: Silu,
    l2: Linear,
}

impl ClassEmbedding {
    pub fn new(num_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            num_classes,
            dim,
            l1: Linear::new(num_classes, dim, rng),
            act: Silu::default(),
            l2: Linear::new(dim, dim, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn one_hot(&self, labels: &[usize]) -> Result<Vec<f64>> {
        let mut rows = vec![0.0; labels.len() * self.num_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= self.num_classes {
                return Err(Error::validation(format!(
                    "label {} outside the {} embedded classes",
                    label, self.num_classes
                )));
            }
            rows[i * self.num_classes + label] = 1.0;
        }
        Ok(rows)
    }

    /// Embeds a batch of labels, caching activations for backward.
    pub fn forward(&mut self, labels: &[usize]) -> Result<Vec<f64>> {
        let x = self.one_hot(labels)?;
        let mut h = self.l1.forward(&x, labels.len());
        self.act.forward(&mut h);
        Ok(self.l2.forward(&h, labels.len()))
    }

    pub fn forward_no_cache(&self, labels: &[usize]) -> Result<Vec<f64>> {
        let x = self.one_hot(labels)?;
        let mut h = self.l1.forward_no_cache(&x, labels.len());
        Silu::forward_no_cache(&mut h);
        Ok(self.l2.forward_no_cache(&h, labels.len()))
    }

    /// Accumulates gradients from the embedding gradient rows.
    pub fn backward(&mut self, d_emb: &[f64]) {
        let mut dh = self.l2.backward(d_emb);
        self.act.backward(&mut dh);
        self.l1.backward(&dh);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [w1, b1] = self.l1.params_mut();
        let [w2, b2] = self.l2.params_mut();
        vec![w1, b1, w2, b2]
    }

    pub fn param_blocks(&self) -> Vec<(&'static str, &Param)> {
        let [w1, b1] = self.l1.params();
        let [w2, b2] = self.l2.params();
        vec![
            ("embed.l1.weight", w1),
            ("embed.l1.bias", b1),
            ("embed.l2.weight", w2),
            ("embed.l2.bias", b2),
        ]
    }

    pub fn param_blocks_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let [w1, b1] = self.l1.params_mut();
        let [w2, b2] = self.l2.params_mut();
        vec![
            ("embed.l1.weight", w1),
            ("embed.l1.bias", b1),
            ("embed.l2.weight", w2),
            ("embed.l2.bias", b2),
        ]
    }
}

/// Sinusoidal features for an integer timestep: half sines, half cosines
/// over geometrically spaced frequencies, values in [-1, 1].
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10_000f64).ln() * i as f64 / denom).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}
