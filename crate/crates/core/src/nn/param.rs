//! Trainable parameter block: values plus accumulated gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(len: usize) -> Self {
        Self {
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    /// Kaiming-uniform init: U(-b, b) with b = sqrt(3 / fan_in), which keeps
    /// pre-activation variance near 1 for the small nets used here.
    pub fn kaiming(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let value = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            value,
            grad: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Flatten helpers over a network's ordered parameter list.
pub fn total_len(params: &[&Param]) -> usize {
    params.iter().map(|p| p.len()).sum()
}
