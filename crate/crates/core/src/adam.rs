//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // beta1 = 0.5 is the usual choice for adversarial training.
        AdamConfig {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub moments: Vec<(Tensor, Tensor)>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let moments = params
            .iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .collect();
        AdamState {
            config,
            moments,
            t: 0,
        }
    }

    /// One bias-corrected update over aligned parameter/gradient lists.
    /// Parameters keep their dtype tag (f32 tensors are re-rounded).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam_step: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.moments.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if !param.same_shape(grad) {
                return Err(Error::Dimension {
                    op: "adam_step",
                    expected: format!("{:?}", param.shape()),
                    got: format!("{:?}", grad.shape()),
                });
            }
            let dtype = param.dtype();
            for ((p, g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            let rounded = std::mem::replace(param as &mut Tensor, Tensor::scalar(0.0))
                .with_dtype(dtype);
            **param = rounded;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..10 {
            let g = Tensor::zeros(&[3]);
            state.step(&mut [&mut p], &[g]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.t, 10);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Tensor::scalar(0.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut state = AdamState::new(cfg, &[&p]);
        state.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // bias-corrected first step is -lr * g / (|g| + eps') ~ -lr
        assert!((p.item() + 0.01).abs() < 1e-6, "param {}", p.item());
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = Tensor::scalar(0.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut state = AdamState::new(cfg, &[&w]);
        for _ in 0..5000 {
            let g = Tensor::scalar(2.0 * (w.item() - 2.0));
            state.step(&mut [&mut w], &[g]).unwrap();
            if (w.item() - 2.0).abs() < 1e-3 {
                return;
            }
        }
        panic!("did not converge: w = {}", w.item());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        let g = Tensor::zeros(&[3]);
        assert!(state.step(&mut [&mut p], &[g]).is_err());
    }
}
