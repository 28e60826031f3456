//! 3x3 convolution with padding 1 and stride 1 or 2, with hand-written
//! backward pass. Inner loops run over contiguous rows so the compiler can
//! vectorize them; this is the hot path of the whole pipeline.

use super::param::Param;
use super::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    /// Layout [out_c][in_c][3][3].
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        Self {
            in_c,
            out_c,
            stride,
            weight: Param::kaiming(out_c * in_c * 9, in_c * 9, rng),
            bias: Param::zeros(out_c),
            input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward_no_cache(x);
        self.input = Some(x.clone());
        y
    }

    pub fn forward_no_cache(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut y = Tensor::zeros(x.n, self.out_c, oh, ow);
        let s = self.stride;
        for ni in 0..x.n {
            for co in 0..self.out_c {
                let plane = y.plane_mut(ni, co);
                plane.fill(self.bias.value[co]);
                for ci in 0..self.in_c {
                    let w9 = &self.weight.value[(co * self.in_c + ci) * 9..][..9];
                    accum_conv(plane, x.plane(ni, ci), w9, x.h, x.w, oh, ow, s);
                }
            }
        }
        y
    }

    /// Backpropagate `dy`, accumulating weight/bias gradients. Returns the
    /// input gradient when `need_dx` is set; the first layer of a network
    /// can skip that work.
    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let x = self.input.as_ref().expect("conv backward before forward");
        let (oh, ow) = self.out_hw(x.h, x.w);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (x.n, self.out_c, oh, ow));
        let s = self.stride;

        for ni in 0..x.n {
            for co in 0..self.out_c {
                let dy_plane = dy.plane(ni, co);
                self.bias.grad[co] += dy_plane.iter().sum::<f64>();
                for ci in 0..self.in_c {
                    let gw = &mut self.weight.grad[(co * self.in_c + ci) * 9..][..9];
                    accum_weight_grad(gw, x.plane(ni, ci), dy_plane, x.h, x.w, oh, ow, s);
                }
            }
        }

        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(x.n, self.in_c, x.h, x.w);
        for ni in 0..x.n {
            for co in 0..self.out_c {
                let dy_plane = dy.plane(ni, co);
                for ci in 0..self.in_c {
                    let w9 = &self.weight.value[(co * self.in_c + ci) * 9..][..9];
                    accum_input_grad(dx.plane_mut(ni, ci), dy_plane, w9, x.h, x.w, oh, ow, s);
                }
            }
        }
        Some(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Valid output-x range (inclusive) for kernel column `kx`: the input column
/// ox*s + kx - 1 must land inside [0, w).
#[inline]
fn ox_range(kx: usize, w: usize, ow: usize, s: usize) -> Option<(usize, usize)> {
    let lo = if kx == 0 { 1 } else { 0 };
    if kx > w {
        return None;
    }
    let hi = ((w - kx) / s).min(ow - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

fn accum_conv(
    out: &mut [f64],
    inp: &[f64],
    w9: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    s: usize,
) {
    for ky in 0..3usize {
        for oy in 0..oh {
            let iy = (oy * s + ky) as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let in_row = &inp[iy as usize * w..iy as usize * w + w];
            let out_row = &mut out[oy * ow..oy * ow + ow];
            for kx in 0..3usize {
                let wv = w9[ky * 3 + kx];
                let Some((lo, hi)) = ox_range(kx, w, ow, s) else {
                    continue;
                };
                if s == 1 {
                    let src = &in_row[lo + kx - 1..lo + kx - 1 + (hi - lo + 1)];
                    for (d, &v) in out_row[lo..=hi].iter_mut().zip(src) {
                        *d += wv * v;
                    }
                } else {
                    for ox in lo..=hi {
                        out_row[ox] += wv * in_row[ox * s + kx - 1];
                    }
                }
            }
        }
    }
}

fn accum_weight_grad(
    gw: &mut [f64],
    inp: &[f64],
    dy_plane: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    s: usize,
) {
    for ky in 0..3usize {
        for oy in 0..oh {
            let iy = (oy * s + ky) as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let in_row = &inp[iy as usize * w..iy as usize * w + w];
            let dy_row = &dy_plane[oy * ow..oy * ow + ow];
            for kx in 0..3usize {
                let Some((lo, hi)) = ox_range(kx, w, ow, s) else {
                    continue;
                };
                let mut acc = 0.0;
                if s == 1 {
                    let src = &in_row[lo + kx - 1..lo + kx - 1 + (hi - lo + 1)];
                    for (&d, &v) in dy_row[lo..=hi].iter().zip(src) {
                        acc += d * v;
                    }
                } else {
                    for ox in lo..=hi {
                        acc += dy_row[ox] * in_row[ox * s + kx - 1];
                    }
                }
                gw[ky * 3 + kx] += acc;
            }
        }
    }
}

fn accum_input_grad(
    dx: &mut [f64],
    dy_plane: &[f64],
    w9: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    s: usize,
) {
    for ky in 0..3usize {
        for oy in 0..oh {
            let iy = (oy * s + ky) as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let dx_row = &mut dx[iy as usize * w..iy as usize * w + w];
            let dy_row = &dy_plane[oy * ow..oy * ow + ow];
            for kx in 0..3usize {
                let wv = w9[ky * 3 + kx];
                let Some((lo, hi)) = ox_range(kx, w, ow, s) else {
                    continue;
                };
                if s == 1 {
                    let dst = &mut dx_row[lo + kx - 1..lo + kx - 1 + (hi - lo + 1)];
                    for (d, &g) in dst.iter_mut().zip(&dy_row[lo..=hi]) {
                        *d += wv * g;
                    }
                } else {
                    for ox in lo..=hi {
                        dx_row[ox * s + kx - 1] += wv * dy_row[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn reference_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let (oh, ow) = conv.out_hw(x.h, x.w);
        let mut y = Tensor::zeros(x.n, conv.out_c, oh, ow);
        for ni in 0..x.n {
            for co in 0..conv.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..conv.in_c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * conv.stride + ky) as isize - 1;
                                    let ix = (ox * conv.stride + kx) as isize - 1;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= x.h as isize
                                        || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    acc += conv.weight.value
                                        [(co * conv.in_c + ci) * 9 + ky * 3 + kx]
                                        * x.plane(ni, ci)[iy as usize * x.w + ix as usize];
                                }
                            }
                        }
                        y.plane_mut(ni, co)[oy * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(
            n,
            c,
            h,
            w,
            (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &stride in &[1usize, 2] {
            let mut conv = Conv2d::new(3, 4, stride, &mut rng);
            for b in conv.bias.value.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
            let x = random_tensor(2, 3, 8, 8, &mut rng);
            let fast = conv.forward(&x);
            let slow = reference_conv(&x, &conv);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "fast {a} vs naive {b}");
            }
        }
    }

    #[test]
    fn odd_sizes_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(h, w) in &[(5usize, 7usize), (7, 5), (1, 1), (2, 3)] {
            let mut conv = Conv2d::new(2, 3, 1, &mut rng);
            let x = random_tensor(1, 2, h, w, &mut rng);
            let fast = conv.forward(&x);
            let slow = reference_conv(&x, &conv);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Gradient check against central finite differences through a random
    /// linear readout of the conv output.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &stride in &[1usize, 2] {
            let mut conv = Conv2d::new(2, 3, stride, &mut rng);
            let x = random_tensor(2, 2, 6, 6, &mut rng);
            let (oh, ow) = conv.out_hw(6, 6);
            let probe: Vec<f64> = (0..2 * 3 * oh * ow)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();

            let loss = |c: &Conv2d, xx: &Tensor| -> f64 {
                let y = c.forward_no_cache(xx);
                y.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
            };

            let y = conv.forward(&x);
            let dy = Tensor::from_vec(2, 3, oh, ow, probe.clone());
            assert_eq!(y.data.len(), dy.data.len());
            let dx = conv.backward(&dy, true).unwrap();

            let h = 1e-6;
            // weight coords
            for &i in &[0usize, 5, 17, conv.weight.len() - 1] {
                let orig = conv.weight.value[i];
                conv.weight.value[i] = orig + h;
                let lp = loss(&conv, &x);
                conv.weight.value[i] = orig - h;
                let lm = loss(&conv, &x);
                conv.weight.value[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - conv.weight.grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "weight grad {} vs fd {}",
                    conv.weight.grad[i],
                    fd
                );
            }
            // bias coord
            {
                let orig = conv.bias.value[1];
                conv.bias.value[1] = orig + h;
                let lp = loss(&conv, &x);
                conv.bias.value[1] = orig - h;
                let lm = loss(&conv, &x);
                conv.bias.value[1] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - conv.bias.grad[1]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
            // input coords
            let mut xm = x.clone();
            for &i in &[0usize, 13, 40, xm.data.len() - 1] {
                let orig = xm.data[i];
                xm.data[i] = orig + h;
                let lp = loss(&conv, &xm);
                xm.data[i] = orig - h;
                let lm = loss(&conv, &xm);
                xm.data[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "input grad {} vs fd {}",
                    dx.data[i],
                    fd
                );
            }
        }
    }
}
