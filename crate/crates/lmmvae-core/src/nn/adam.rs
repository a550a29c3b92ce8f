use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

/// Adaptive-moment optimizer state for one flat parameter tensor.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update `params -= lr * m_hat / (sqrt(v_hat) + eps)` with
    /// bias-corrected moment estimates.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(
            params.len(),
            self.first_moment.len(),
            "adam: parameter length mismatch"
        );
        assert_eq!(grads.len(), params.len(), "adam: gradient length mismatch");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// One Adam state per tensor, so accumulator shapes mirror the parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn for_tensors(lens: &[usize], learning_rate: f64) -> Self {
        Optimizer {
            states: lens
                .iter()
                .map(|&l| AdamState::new(l, learning_rate))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(
            params.len(),
            self.states.len(),
            "optimizer: tensor count mismatch"
        );
        assert_eq!(
            grads.len(),
            self.states.len(),
            "optimizer: gradient count mismatch"
        );
        for ((state, p), g) in self.states.iter_mut().zip(params.iter_mut()).zip(grads) {
            state.step(p, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut state = AdamState::new(3, 0.1);
        let mut params = [1.0, -2.0, 0.5];
        state.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, [1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut state = AdamState::new(2, 0.01);
        let mut params = [0.0, 0.0];
        for _ in 0..50 {
            state.step(&mut params, &[1.0, -2.5]);
        }
        assert!(params[0] < 0.0);
        assert!(params[1] > 0.0);
    }

    #[test]
    fn two_step_trace_matches_frozen_oracle() {
        // Scalar parameter at 0.3, gradients (1.0, 0.5), lr 0.1, betas
        // (0.9, 0.999), eps 1e-8. Expected values computed externally with
        // 50-digit decimal arithmetic.
        let mut state = AdamState::new(1, 0.1);
        let mut params = [0.3];
        state.step(&mut params, &[1.0]);
        assert!(
            (params[0] - 0.20000000099999999).abs() < 1e-10,
            "step 1: {}",
            params[0]
        );
        state.step(&mut params, &[0.5]);
        assert!(
            (params[0] - 0.10678203829816041).abs() < 1e-10,
            "step 2: {}",
            params[0]
        );
    }
}
