//! Adam optimizer over ordered parameter lists.

use super::param::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    moment1: Vec<Vec<f64>>,
    moment2: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moment1: Vec::new(),
            moment2: Vec::new(),
        }
    }

    /// One update over the network's ordered parameter list. The list must
    /// have identical structure on every call.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.moment1.is_empty() {
            self.moment1 = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.moment2 = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.moment1.len(), params.len(), "optimizer param list changed");
        self.step_count += 1;
        let t = self.step_count as f64;
        let corr1 = 1.0 - self.beta1.powf(t);
        let corr2 = 1.0 - self.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(self.moment1[i].len(), p.len(), "optimizer param shape changed");
            let m = &mut self.moment1[i];
            let v = &mut self.moment2[i];
            for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the very first Adam step is lr * sign(grad)
        // (up to eps).
        let mut p = Param::zeros(2);
        p.grad = vec![0.5, -2.0];
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]);
        assert!((p.value[0] + 0.1).abs() < 1e-6);
        assert!((p.value[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::zeros(1);
        p.value[0] = 3.0;
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            p.grad[0] = 2.0 * (p.value[0] - 1.25);
            opt.step(&mut [&mut p]);
        }
        assert!((p.value[0] - 1.25).abs() < 1e-3);
    }
}
