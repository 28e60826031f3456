//! Dense NCHW tensor of f64 values. The whole pipeline runs on these; no
//! external ML framework is involved.

/// Batched channel-major tensor. A single image is a `Tensor` with `n == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let sl = self.sample_len();
        &self.data[n * sl..(n + 1) * sl]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let sl = self.sample_len();
        &mut self.data[n * sl..(n + 1) * sl]
    }

    /// Copy sample `src_idx` of `src` into slot `dst_idx` of `self`.
    pub fn copy_sample_from(&mut self, dst_idx: usize, src: &Tensor, src_idx: usize) {
        assert_eq!(self.sample_len(), src.sample_len(), "sample shape mismatch");
        self.sample_mut(dst_idx).copy_from_slice(src.sample(src_idx));
    }

    /// Stack single-sample tensors into one batch.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack empty list");
        let (c, h, w) = (items[0].c, items[0].h, items[0].w);
        let mut out = Tensor::zeros(items.len(), c, h, w);
        for (i, t) in items.iter().enumerate() {
            assert_eq!(t.n, 1, "stack expects single-sample tensors");
            assert_eq!((t.c, t.h, t.w), (c, h, w), "stack shape mismatch");
            out.sample_mut(i).copy_from_slice(&t.data);
        }
        out
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn scale(&mut self, v: f64) {
        for x in &mut self.data {
            *x *= v;
        }
    }

    /// self += other (same shape).
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Mean of squared elements.
    pub fn mean_sq(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flip every sample left-to-right.
    pub fn flipped_horizontal(&self) -> Tensor {
        let mut out = self.clone();
        for n in 0..self.n {
            for c in 0..self.c {
                let plane = out.plane_mut(n, c);
                for row in plane.chunks_exact_mut(self.w) {
                    row.reverse();
                }
            }
        }
        out
    }
}
