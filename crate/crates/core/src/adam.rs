//! Adam optimizer with decoupled weight decay over flat parameter vectors.
//!
//! The adaptive step uses bias-corrected first and second moments; weight
//! decay is applied after it as a direct multiplicative shrink, so decay
//! strength does not depend on the gradient magnitude.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step_count: u64,
    learning_rate: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    weight_decay: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with the standard moment coefficients
    /// (`beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`).
    pub fn new(param_count: usize, learning_rate: T, weight_decay: T) -> Result<Self> {
        if learning_rate <= T::zero() || !learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if weight_decay < T::zero() || !weight_decay.is_finite() {
            return Err(Error::invalid("weight decay must be non-negative and finite"));
        }
        Ok(AdamState {
            first_moment: vec![T::zero(); param_count],
            second_moment: vec![T::zero(); param_count],
            step_count: 0,
            learning_rate,
            beta1: T::from(0.9).unwrap(),
            beta2: T::from(0.999).unwrap(),
            epsilon: T::from(1e-8).unwrap(),
            weight_decay,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update in place: adaptive step, then decoupled decay.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer sized for {} parameters, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient entries must be finite".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let correction1 = T::one() - self.beta1.powi(t);
        let correction2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (one - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (one - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / correction1;
            let v_hat = self.second_moment[i] / correction2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            params[i] -= self.learning_rate * self.weight_decay * params[i];
        }
        Ok(())
    }
}
