//! Adam optimizer over a fixed, ordered set of parameter tensors.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Standard Adam state: first/second moment estimates per parameter tensor
/// plus the step counter used for bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over all parameters; `grads[i]` must match `params[i]`.
    /// Maximizing callers pass the gradient of the negative objective.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.step as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.step as f64);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "parameter/gradient shape mismatch");
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / b1t;
                let vhat = vd[i] / b2t;
                pd[i] -= self.learning_rate * mhat / (libm::sqrt(vhat) + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::vector(alloc::vec![1.0, -2.0]);
        let mut adam = Adam::new(0.01, &[alloc::vec![2]]);
        adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]);
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // p=0, g=1, lr=0.01: bias-corrected first step is lr/(1+eps) ≈ lr.
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(0.01, &[alloc::vec![]]);
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]);
        assert!((p.item() + 0.01).abs() < 1e-9, "p = {}", p.item());
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let grads = [
            Tensor::vector(alloc::vec![0.3, -0.7]),
            Tensor::vector(alloc::vec![-0.1, 0.2]),
            Tensor::vector(alloc::vec![0.9, 0.4]),
        ];
        let run = || {
            let mut p = Tensor::vector(alloc::vec![0.5, 0.5]);
            let mut adam = Adam::new(0.05, &[alloc::vec![2]]);
            for g in &grads {
                adam.step(&mut [&mut p], core::slice::from_ref(g));
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert_eq!(a.data()[1].to_bits(), b.data()[1].to_bits());
    }
}
