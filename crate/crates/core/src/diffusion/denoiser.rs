//! Noise-prediction network over the concatenated conditioned latent.
//!
//! A small encoder-decoder with one downsampling stage and an additive skip
//! connection. Conditioning is the sum of a timestep embedding (sinusoidal
//! features through a two-layer MLP) and the learned class embedding; it is
//! injected as a per-channel bias after each encoder convolution. The
//! network reads all 2*c_lat+1 input channels but predicts noise only for
//! the image-latent channels.

use rand_chacha::ChaCha8Rng;

use crate::diffusion::conditioning::timestep_features;
use crate::error::{Error, Result};
use crate::nn::{upsample2x, upsample2x_backward, Conv2d, Linear, Param, Silu, Tensor};

pub struct Denoiser {
    latent_channels: usize,
    cond_dim: usize,
    enc1: Conv2d,
    inj1: Linear,
    act1: Silu,
    enc2: Conv2d,
    inj2: Linear,
    act2: Silu,
    mid: Conv2d,
    act3: Silu,
    up: Conv2d,
    act4: Silu,
    out: Conv2d,
    tmlp1: Linear,
    tact: Silu,
    tmlp2: Linear,
}

fn add_channel_bias(t: &mut Tensor, rows: &[f64]) {
    for n in 0..t.n {
        for c in 0..t.c {
            let b = rows[n * t.c + c];
            for v in t.plane_mut(n, c) {
                *v += b;
            }
        }
    }
}

fn channel_bias_grad(d: &Tensor) -> Vec<f64> {
    let mut rows = vec![0.0; d.n * d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            rows[n * d.c + c] = d.plane(n, c).iter().sum();
        }
    }
    rows
}

impl Denoiser {
    pub fn new(
        latent_channels: usize,
        channels: usize,
        cond_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_c = 2 * latent_channels + 1;
        Self {
            latent_channels,
            cond_dim,
            enc1: Conv2d::new(in_c, channels, 1, rng),
            inj1: Linear::new(cond_dim, channels, rng),
            act1: Silu::default(),
            enc2: Conv2d::new(channels, 2 * channels, 2, rng),
            inj2: Linear::new(cond_dim, 2 * channels, rng),
            act2: Silu::default(),
            mid: Conv2d::new(2 * channels, 2 * channels, 1, rng),
            act3: Silu::default(),
            up: Conv2d::new(2 * channels, channels, 1, rng),
            act4: Silu::default(),
            out: Conv2d::new(channels, latent_channels, 1, rng),
            tmlp1: Linear::new(cond_dim, cond_dim, rng),
            tact: Silu::default(),
            tmlp2: Linear::new(cond_dim, cond_dim, rng),
        }
    }

    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn num_params(&self) -> usize {
        self.param_blocks().iter().map(|(_, p)| p.len()).sum()
    }

    fn check_inputs(&self, z: &Tensor, ts: &[usize], y_emb: &[f64]) -> Result<()> {
        if z.c != self.input_channels() {
            return Err(Error::validation(format!(
                "conditioned latent has {} channels, denoiser expects {}",
                z.c,
                self.input_channels()
            )));
        }
        if z.h % 2 != 0 || z.w % 2 != 0 {
            return Err(Error::validation(format!(
                "latent grid {}x{} must have even sides",
                z.h, z.w
            )));
        }
        if ts.len() != z.n || y_emb.len() != z.n * self.cond_dim {
            return Err(Error::validation(format!(
                "batch of {} needs {} timesteps and {} embedding values, got {} and {}",
                z.n,
                z.n,
                z.n * self.cond_dim,
                ts.len(),
                y_emb.len()
            )));
        }
        Ok(())
    }

    fn time_feature_rows(&self, ts: &[usize]) -> Vec<f64> {
        let mut rows = Vec::with_capacity(ts.len() * self.cond_dim);
        for &t in ts {
            rows.extend(timestep_features(t, self.cond_dim));
        }
        rows
    }

    fn cond_forward(&mut self, ts: &[usize], y_emb: &[f64]) -> Vec<f64> {
        let feats = self.time_feature_rows(ts);
        let mut h = self.tmlp1.forward(&feats, ts.len());
        self.tact.forward(&mut h);
        let mut cond = self.tmlp2.forward(&h, ts.len());
        for (c, &y) in cond.iter_mut().zip(y_emb) {
            *c += y;
        }
        cond
    }

    fn cond_forward_no_cache(&self, ts: &[usize], y_emb: &[f64]) -> Vec<f64> {
        let feats = self.time_feature_rows(ts);
        let mut h = self.tmlp1.forward_no_cache(&feats, ts.len());
        Silu::forward_no_cache(&mut h);
        let mut cond = self.tmlp2.forward_no_cache(&h, ts.len());
        for (c, &y) in cond.iter_mut().zip(y_emb) {
            *c += y;
        }
        cond
    }

    /// Predicts the noise in the image-latent channels, caching every
    /// intermediate for `backward`.
    pub fn forward(&mut self, z: &Tensor, ts: &[usize], y_emb: &[f64]) -> Result<Tensor> {
        self.check_inputs(z, ts, y_emb)?;
        let n = z.n;
        let cond = self.cond_forward(ts, y_emb);

        let mut a1 = self.enc1.forward(z);
        add_channel_bias(&mut a1, &self.inj1.forward(&cond, n));
        self.act1.forward(&mut a1.data);
        let h1 = a1;

        let mut a2 = self.enc2.forward(&h1);
        add_channel_bias(&mut a2, &self.inj2.forward(&cond, n));
        self.act2.forward(&mut a2.data);

        let mut m = self.mid.forward(&a2);
        self.act3.forward(&mut m.data);

        let mut u = self.up.forward(&upsample2x(&m));
        self.act4.forward(&mut u.data);

        u.add_assign(&h1);
        Ok(self.out.forward(&u))
    }

    /// Same computation without touching the backward caches.
    pub fn forward_no_cache(&self, z: &Tensor, ts: &[usize], y_emb: &[f64]) -> Result<Tensor> {
        self.check_inputs(z, ts, y_emb)?;
        let n = z.n;
        let cond = self.cond_forward_no_cache(ts, y_emb);

        let mut a1 = self.enc1.forward_no_cache(z);
        add_channel_bias(&mut a1, &self.inj1.forward_no_cache(&cond, n));
        Silu::forward_no_cache(&mut a1.data);
        let h1 = a1;

        let mut a2 = self.enc2.forward_no_cache(&h1);
        add_channel_bias(&mut a2, &self.inj2.forward_no_cache(&cond, n));
        Silu::forward_no_cache(&mut a2.data);

        let mut m = self.mid.forward_no_cache(&a2);
        Silu::forward_no_cache(&mut m.data);

        let mut u = self.up.forward_no_cache(&upsample2x(&m));
        Silu::forward_no_cache(&mut u.data);

        u.add_assign(&h1);
        Ok(self.out.forward_no_cache(&u))
    }

    /// Backpropagates the prediction gradient, accumulating parameter
    /// gradients and returning the gradient with respect to the class
    /// embedding rows.
    pub fn backward(&mut self, d_eps: &Tensor) -> Vec<f64> {
        let d_skip = self.out.backward(d_eps, true).expect("need dx");

        let mut d_u = d_skip.clone();
        self.act4.backward(&mut d_u.data);
        let d_up_in = self.up.backward(&d_u, true).expect("need dx");
        let mut d_m = upsample2x_backward(&d_up_in);
        self.act3.backward(&mut d_m.data);

        let mut d_a2 = self.mid.backward(&d_m, true).expect("need dx");
        self.act2.backward(&mut d_a2.data);
        let d_cond2 = self.inj2.backward(&channel_bias_grad(&d_a2));
        let mut d_h1 = self.enc2.backward(&d_a2, true).expect("need dx");

        d_h1.add_assign(&d_skip);
        self.act1.backward(&mut d_h1.data);
        let d_cond1 = self.inj1.backward(&channel_bias_grad(&d_h1));
        self.enc1.backward(&d_h1, false);

        let mut d_cond = d_cond1;
        for (a, b) in d_cond.iter_mut().zip(&d_cond2) {
            *a += b;
        }
        let mut dh = self.tmlp2.backward(&d_cond);
        self.tact.backward(&mut dh);
        self.tmlp1.backward(&dh);
        d_cond
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.param_blocks_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn param_blocks(&self) -> Vec<(&'static str, &Param)> {
        let [w1, b1] = self.enc1.params();
        let [iw1, ib1] = self.inj1.params();
        let [w2, b2] = self.enc2.params();
        let [iw2, ib2] = self.inj2.params();
        let [wm, bm] = self.mid.params();
        let [wu, bu] = self.up.params();
        let [wo, bo] = self.out.params();
        let [tw1, tb1] = self.tmlp1.params();
        let [tw2, tb2] = self.tmlp2.params();
        vec![
            ("denoiser.enc1.weight", w1),
            ("denoiser.enc1.bias", b1),
            ("denoiser.inj1.weight", iw1),
            ("denoiser.inj1.bias", ib1),
            ("denoiser.enc2.weight", w2),
            ("denoiser.enc2.bias", b2),
            ("denoiser.inj2.weight", iw2),
            ("denoiser.inj2.bias", ib2),
            ("denoiser.mid.weight", wm),
            ("denoiser.mid.bias", bm),
            ("denoiser.up.weight", wu),
            ("denoiser.up.bias", bu),
            ("denoiser.out.weight", wo),
            ("denoiser.out.bias", bo),
            ("denoiser.tmlp1.weight", tw1),
            ("denoiser.tmlp1.bias", tb1),
            ("denoiser.tmlp2.weight", tw2),
            ("denoiser.tmlp2.bias", tb2),
        ]
    }

    pub fn param_blocks_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let [w1, b1] = self.enc1.params_mut();
        let [iw1, ib1] = self.inj1.params_mut();
        let [w2, b2] = self.enc2.params_mut();
        let [iw2, ib2] = self.inj2.params_mut();
        let [wm, bm] = self.mid.params_mut();
        let [wu, bu] = self.up.params_mut();
        let [wo, bo] = self.out.params_mut();
        let [tw1, tb1] = self.tmlp1.params_mut();
        let [tw2, tb2] = self.tmlp2.params_mut();
        vec![
            ("denoiser.enc1.weight", w1),
            ("denoiser.enc1.bias", b1),
            ("denoiser.inj1.weight", iw1),
            ("denoiser.inj1.bias", ib1),
            ("denoiser.enc2.weight", w2),
            ("denoiser.enc2.bias", b2),
            ("denoiser.inj2.weight", iw2),
            ("denoiser.inj2.bias", ib2),
            ("denoiser.mid.weight", wm),
            ("denoiser.mid.bias", bm),
            ("denoiser.up.weight", wu),
            ("denoiser.up.bias", bu),
            ("denoiser.out.weight", wo),
            ("denoiser.out.bias", bo),
            ("denoiser.tmlp1.weight", tw1),
            ("denoiser.tmlp1.bias", tb1),
            ("denoiser.tmlp2.weight", tw2),
            ("denoiser.tmlp2.bias", tb2),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_latent(rng: &mut ChaCha8Rng, n: usize, c: usize, hw: usize) -> Tensor {
        let mut t = Tensor::zeros(n, c, hw, hw);
        for v in &mut t.data {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn output_covers_only_image_latent_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Denoiser::new(3, 4, 8, &mut rng);
        let z = random_latent(&mut rng, 2, 7, 8);
        let y = vec![0.1; 2 * 8];
        let eps = net.forward(&z, &[3, 9], &y).unwrap();
        assert_eq!((eps.n, eps.c, eps.h, eps.w), (2, 3, 8, 8));
    }

    #[test]
    fn rejects_wrong_channel_count_and_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Denoiser::new(3, 4, 8, &mut rng);
        let bad = random_latent(&mut rng, 1, 6, 8);
        assert!(net.forward(&bad, &[1], &vec![0.0; 8]).is_err());
        let z = random_latent(&mut rng, 1, 7, 8);
        assert!(net.forward(&z, &[1, 2], &vec![0.0; 8]).is_err());
        assert!(net.forward(&z, &[1], &vec![0.0; 4]).is_err());
    }

    #[test]
    fn cached_and_uncached_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Denoiser::new(2, 4, 8, &mut rng);
        let z = random_latent(&mut rng, 2, 5, 4);
        let y: Vec<f64> = (0..16).map(|i| i as f64 * 0.01).collect();
        let a = net.forward(&z, &[2, 7], &y).unwrap();
        let b = net.forward_no_cache(&z, &[2, 7], &y).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn conditioning_changes_the_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Denoiser::new(2, 4, 8, &mut rng);
        let z = random_latent(&mut rng, 1, 5, 4);
        let y_a = vec![0.2; 8];
        let y_b = vec![-0.4; 8];
        let out_a = net.forward_no_cache(&z, &[3], &y_a).unwrap();
        let out_b = net.forward_no_cache(&z, &[3], &y_b).unwrap();
        assert_ne!(out_a.data, out_b.data);
        let out_c = net.forward_no_cache(&z, &[9], &y_a).unwrap();
        assert_ne!(out_a.data, out_c.data);
    }
}
