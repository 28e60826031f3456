//! Activations, resampling, and loss heads with hand-written backward passes.

use super::tensor::Tensor;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation (x * sigmoid(x)); smooth, which keeps finite-difference
/// gradient checks clean.
#[derive(Debug, Clone, Default)]
pub struct Silu {
    input: Option<Vec<f64>>,
}

impl Silu {
    pub fn forward(&mut self, x: &mut [f64]) {
        self.input = Some(x.to_vec());
        for v in x.iter_mut() {
            *v *= sigmoid(*v);
        }
    }

    pub fn forward_no_cache(x: &mut [f64]) {
        for v in x.iter_mut() {
            *v *= sigmoid(*v);
        }
    }

    pub fn backward(&self, dy: &mut [f64]) {
        let input = self.input.as_ref().expect("silu backward before forward");
        for (d, &x) in dy.iter_mut().zip(input) {
            let s = sigmoid(x);
            *d *= s * (1.0 + x * (1.0 - s));
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    input: Option<Vec<f64>>,
}

impl Relu {
    pub fn forward(&mut self, x: &mut [f64]) {
        self.input = Some(x.to_vec());
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn forward_no_cache(x: &mut [f64]) {
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn backward(&self, dy: &mut [f64]) {
        let input = self.input.as_ref().expect("relu backward before forward");
        for (d, &x) in dy.iter_mut().zip(input) {
            if x <= 0.0 {
                *d = 0.0;
            }
        }
    }
}

/// Sigmoid layer; caches its output (backward uses y * (1 - y)).
#[derive(Debug, Clone, Default)]
pub struct SigmoidLayer {
    output: Option<Vec<f64>>,
}

impl SigmoidLayer {
    pub fn forward(&mut self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = sigmoid(*v);
        }
        self.output = Some(x.to_vec());
    }

    pub fn forward_no_cache(x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = sigmoid(*v);
        }
    }

    pub fn backward(&self, dy: &mut [f64]) {
        let out = self.output.as_ref().expect("sigmoid backward before forward");
        for (d, &y) in dy.iter_mut().zip(out) {
            *d *= y * (1.0 - y);
        }
    }
}

/// Nearest-neighbor 2x upsampling. Stateless.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.n, x.c, x.h * 2, x.w * 2);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for iy in 0..x.h {
                for ix in 0..x.w {
                    let v = src[iy * x.w + ix];
                    let base = (iy * 2) * (x.w * 2) + ix * 2;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + x.w * 2] = v;
                    dst[base + x.w * 2 + 1] = v;
                }
            }
        }
    }
    y
}

/// Backward of `upsample2x`: each input cell receives the sum of its 2x2 block.
pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    assert!(dy.h % 2 == 0 && dy.w % 2 == 0);
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for n in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for iy in 0..h {
                for ix in 0..w {
                    let base = (iy * 2) * dy.w + ix * 2;
                    dst[iy * w + ix] =
                        src[base] + src[base + 1] + src[base + dy.w] + src[base + dy.w + 1];
                }
            }
        }
    }
    dx
}

/// Mean squared error over all elements, with gradient wrt `pred`.
pub fn mse_with_grad(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.n, pred.c, pred.h, pred.w);
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Softmax cross-entropy over `rows` samples of `classes` logits each.
/// Returns mean loss and gradient wrt the logits.
pub fn softmax_cross_entropy(
    logits: &[f64],
    rows: usize,
    classes: usize,
    labels: &[usize],
) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), rows * classes);
    assert_eq!(labels.len(), rows);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &l in row {
            denom += (l - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - row[labels[r]];
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (k, &l) in row.iter().enumerate() {
            let p = (l - log_denom).exp();
            g[k] = (p - if k == labels[r] { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    (loss / rows as f64, grad)
}
