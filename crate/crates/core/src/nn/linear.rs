//! Fully connected layer over flat row-major batches.

use super::param::Param;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    /// Layout [out_f][in_f].
    pub weight: Param,
    pub bias: Param,
    input: Option<Vec<f64>>,
    rows: usize,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_f,
            out_f,
            weight: Param::kaiming(out_f * in_f, in_f, rng),
            bias: Param::zeros(out_f),
            input: None,
            rows: 0,
        }
    }

    pub fn forward(&mut self, x: &[f64], rows: usize) -> Vec<f64> {
        let y = self.forward_no_cache(x, rows);
        self.input = Some(x.to_vec());
        self.rows = rows;
        y
    }

    pub fn forward_no_cache(&self, x: &[f64], rows: usize) -> Vec<f64> {
        assert_eq!(x.len(), rows * self.in_f, "linear input shape mismatch");
        let mut y = vec![0.0; rows * self.out_f];
        for r in 0..rows {
            let xr = &x[r * self.in_f..(r + 1) * self.in_f];
            let yr = &mut y[r * self.out_f..(r + 1) * self.out_f];
            for (o, yo) in yr.iter_mut().enumerate() {
                let wr = &self.weight.value[o * self.in_f..(o + 1) * self.in_f];
                let mut acc = self.bias.value[o];
                for (&wv, &xv) in wr.iter().zip(xr) {
                    acc += wv * xv;
                }
                *yo = acc;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let x = self.input.as_ref().expect("linear backward before forward");
        let rows = self.rows;
        assert_eq!(dy.len(), rows * self.out_f);
        let mut dx = vec![0.0; rows * self.in_f];
        for r in 0..rows {
            let xr = &x[r * self.in_f..(r + 1) * self.in_f];
            let dyr = &dy[r * self.out_f..(r + 1) * self.out_f];
            let dxr = &mut dx[r * self.in_f..(r + 1) * self.in_f];
            for (o, &g) in dyr.iter().enumerate() {
                self.bias.grad[o] += g;
                let wr = &self.weight.value[o * self.in_f..(o + 1) * self.in_f];
                let gw = &mut self.weight.grad[o * self.in_f..(o + 1) * self.in_f];
                for i in 0..self.in_f {
                    gw[i] += g * xr[i];
                    dxr[i] += g * wr[i];
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}
