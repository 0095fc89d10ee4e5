//! Adam with fixed learning rate and default moment parameters.

/// Per-parameter first/second moment state plus bias-corrected updates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Apply one update. `grads[i]` must align with `params[i]`, in the same
    /// order the optimizer was constructed with.
    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((values, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            debug_assert_eq!(values.len(), grad.len());
            for j in 0..values.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                values[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // f(x) = (x - 3)^2, grad = 2(x - 3)
        let mut x = vec![10.0];
        let mut adam = Adam::new(0.1, &[1]);
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 3.0)];
            adam.step(&mut [&mut x], &[&g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "ended at {}", x[0]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With bias correction the very first update is lr-sized regardless
        // of the gradient scale.
        let mut x = vec![0.0];
        let mut adam = Adam::new(0.01, &[1]);
        adam.step(&mut [&mut x], &[&[1e-6]]);
        // Up to the eps guard: lr · g / (g + eps · √bc2-ish) ≈ 0.99 lr.
        assert!((x[0].abs() - 0.01).abs() < 2e-4);
    }
}
