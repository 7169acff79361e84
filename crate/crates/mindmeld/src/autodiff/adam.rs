//! Adaptive-moment optimizer.

use super::{AutodiffError, Tensor};

/// Default exponential decay rates for the first and second moments.
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
/// Default denominator fuzz.
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Apply one update in place. `params[i].grad` supplies the gradient for
/// tensor `i`; a missing gradient is treated as zero (the moments still
/// decay, matching the dense-update convention).
pub fn adam_step(
    params: &mut [&mut Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), AutodiffError> {
    if params.len() != state.m.len() {
        return Err(AutodiffError::OptimizerMismatch(format!(
            "{} parameter tensors, state has {}",
            params.len(),
            state.m.len()
        )));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t as i32;
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if state.m[i].len() != p.len() {
            return Err(AutodiffError::OptimizerMismatch(format!(
                "tensor {i} has {} values, state has {}",
                p.len(),
                state.m[i].len()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let (grad, data) = p.grad_and_data_mut();
        for j in 0..data.len() {
            let g = grad.map_or(0.0, |gr| gr[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam with owned hyperparameters and state, for the common loop shape.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        Self {
            lr,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            state: AdamState::new(params),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), AutodiffError> {
        adam_step(params, &mut self.state, self.lr, self.betas, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad();
        p.zero_grad();
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut state, 0.001, ADAM_BETAS, ADAM_EPS).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_almost_exactly_the_learning_rate() {
        // Bias correction makes the first step lr * g/|g|, up to eps.
        let mut p = Tensor::vector(vec![5.0]).with_grad();
        p.accumulate_grad(&[1.0]);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut state, 0.001, ADAM_BETAS, ADAM_EPS).unwrap();
        let moved = 5.0 - p.data()[0];
        assert!((moved - 0.001).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn repeated_steps_match_the_scalar_trace() {
        let grads = [1.0, 1.0, -0.5, 0.25];
        let expected = reference::adam_scalar_trace(5.0, &grads, 0.001, ADAM_BETAS, ADAM_EPS);
        let mut p = Tensor::vector(vec![5.0]).with_grad();
        let mut state = AdamState::new(&[&p]);
        for (g, want) in grads.iter().zip(&expected) {
            p.zero_grad();
            p.accumulate_grad(&[*g]);
            adam_step(&mut [&mut p], &mut state, 0.001, ADAM_BETAS, ADAM_EPS).unwrap();
            assert_eq!(p.data()[0], *want);
        }
    }

    #[test]
    fn state_and_parameter_counts_must_agree() {
        let mut p = Tensor::vector(vec![1.0]).with_grad();
        let q = Tensor::vector(vec![1.0, 2.0]).with_grad();
        let mut state = AdamState::new(&[&p, &q]);
        let got = adam_step(&mut [&mut p], &mut state, 0.001, ADAM_BETAS, ADAM_EPS);
        assert!(matches!(got, Err(AutodiffError::OptimizerMismatch(_))));
    }

    #[test]
    fn wrapper_tracks_state_across_steps() {
        let grads = [0.4, -0.4, 0.4];
        let expected = reference::adam_scalar_trace(1.0, &grads, 0.01, ADAM_BETAS, ADAM_EPS);
        let mut p = Tensor::vector(vec![1.0]).with_grad();
        let mut opt = Adam::new(0.01, &[&p]);
        for (g, want) in grads.iter().zip(&expected) {
            p.zero_grad();
            p.accumulate_grad(&[*g]);
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.data()[0], *want);
        }
    }
}
