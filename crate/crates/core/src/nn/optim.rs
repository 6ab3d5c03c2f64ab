use crate::error::{check_len, Error, Result};

use super::mlp::Gradient;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub decay1: f64,
    pub decay2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            learning_rate,
            decay1: 0.9,
            decay2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Applies one update in place. A non-finite gradient leaves both the
    /// parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &Gradient) -> Result<()> {
        check_len("adam parameters", self.first_moment.len(), params.len())?;
        check_len("adam gradient", self.first_moment.len(), grad.len())?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient passed to adam".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let correction1 = 1.0 - self.decay1.powi(t);
        let correction2 = 1.0 - self.decay2.powi(t);
        for (((p, m), v), &g) in params
            .iter_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
            .zip(grad.as_slice())
        {
            *m = self.decay1 * *m + (1.0 - self.decay1) * g;
            *v = self.decay2 * *v + (1.0 - self.decay2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Rescales `grad` to l2 norm `max_norm` when it exceeds it. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut Gradient, max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let norm = grad.norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.0.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
