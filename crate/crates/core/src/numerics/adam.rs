use super::Tensor;

/// Adaptive moment estimation over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params[i]` and `grads[i]` must keep the same
    /// shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step_scaled(params, grads, &vec![1.0; params.len()]);
    }

    /// Like [`Adam::step`] with a per-tensor learning-rate multiplier.
    pub fn step_scaled(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr_scale: &[f64]) {
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = self.learning_rate * lr_scale[i];
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![1.0, -1.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![3.0, -0.5])]);
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::vector(vec![5.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = Tensor::vector(vec![2.0 * (p.data()[0] - 2.0)]);
            opt.step(&mut [&mut p], &[g]);
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-2);
    }
}
