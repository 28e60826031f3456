//! Variance schedule and the closed-form forward noising process.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Linear beta schedule with the cumulative alpha products.
///
/// Timesteps are 1-indexed: `beta(1)` is the first noising step and
/// `alpha_bar(t)` is the product of (1 - beta) over steps 1..=t.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Rebuilds a schedule from stored betas (checkpoint loading).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::validation("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::validation("all betas must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::validation(format!(
                "timestep {} outside 1..={}",
                t,
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Builds a linear beta schedule over T steps, endpoints included.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::validation("diffusion steps must be >= 1"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(format!(
            "need 0 < beta_start <= beta_end < 1, got [{}, {}]",
            beta_start, beta_end
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Draws x_t from q(x_t | x_0) with the provided noise:
/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
pub fn forward_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if (eps.n, eps.c, eps.h, eps.w) != (x0.n, x0.c, x0.h, x0.w) {
        return Err(Error::validation(format!(
            "noise shape {}x{}x{}x{} does not match x0 {}x{}x{}x{}",
            eps.n, eps.c, eps.h, eps.w, x0.n, x0.c, x0.h, x0.w
        )));
    }
    let ab = sched.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let mut out = x0.clone();
    for (o, &e) in out.data.iter_mut().zip(&eps.data) {
        *o = signal * *o + noise * e;
    }
    Ok(out)
}
