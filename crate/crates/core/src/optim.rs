//! Adam with bias correction folded into the step size:
//!
//! ```text
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! θ ← θ − lr·√(1−β2ᵗ)/(1−β1ᵗ) · m / (√v + ε)
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers of parameter slot `i`, if it has been updated.
    pub fn moments(&self, i: usize) -> Option<(&[T], &[T])> {
        self.moments.get(i)?.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Restores a state previously read through [`AdamState::moments`].
    pub fn restore(config: AdamConfig, step: u64, moments: Vec<Option<(Vec<T>, Vec<T>)>>) -> Self {
        AdamState { config, step, moments }
    }

    /// Applies one update to every `(parameter, gradient)` slot. Slots without
    /// a gradient are left untouched; slot order must be stable across calls.
    pub fn step<'a, I>(&mut self, slots: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut Tensor<T>, Option<&'a Tensor<T>>)>,
        T: 'a,
    {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step + 1;
        let alpha = T::from_f64(lr * (1.0 - beta2.powi(t as i32)).sqrt() / (1.0 - beta1.powi(t as i32)));
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (c1, c2) = (T::ONE - b1, T::ONE - b2);
        let eps = T::from_f64(eps);

        let slots: Vec<_> = slots.into_iter().collect();
        for (i, (param, grad)) in slots.iter().enumerate() {
            if let Some(g) = grad {
                if g.shape() != param.shape() {
                    return Err(Error::Shape(format!(
                        "adam slot {i}: gradient {:?} does not match parameter {:?}",
                        g.shape(),
                        param.shape()
                    )));
                }
            }
        }
        if self.moments.len() < slots.len() {
            self.moments.resize(slots.len(), None);
        }
        for (i, (param, grad)) in slots.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![T::ZERO; grad.numel()], vec![T::ZERO; grad.numel()]));
            if m.len() != grad.numel() {
                return Err(Error::Shape(format!("adam slot {i}: moment buffers do not match parameter")));
            }
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *p -= alpha * *m / (v.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut state = AdamState::<f64>::new(AdamConfig::default());
        let mut p = Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]).unwrap();
        state.step([(&mut p, Some(&g))]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::<f64>::new(cfg);
        let grads = [0.3, -4.0, 1e-2];
        let mut p = Tensor::zeros(vec![3]).unwrap();
        let g = Tensor::from_f64(vec![3], &grads).unwrap();
        state.step([(&mut p, Some(&g))]).unwrap();
        for (&moved, &gv) in p.data().iter().zip(&grads) {
            // Hand-evaluated t = 1 update: lr·|g| / (|g| + ε/√(1−β2)).
            let expect = cfg.lr * gv.abs() / (gv.abs() + cfg.eps / (1.0 - cfg.beta2).sqrt());
            assert!((moved.abs() - expect).abs() < 1e-15, "{moved} vs {expect}");
            assert!((moved.abs() - 1e-3).abs() < 1e-6);
            assert_eq!(moved.signum(), -gv.signum());
        }
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut state = AdamState::<f64>::new(AdamConfig::default());
        let mut x = Tensor::scalar(1.0);
        let mut last = 0.5;
        for _ in 0..2 {
            let g = x.clone(); // d(½x²)/dx
            state.step([(&mut x, Some(&g))]).unwrap();
            let loss = 0.5 * x.data()[0] * x.data()[0];
            assert!(loss < last);
            last = loss;
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::<f32>::new(AdamConfig::default());
        let mut p = Tensor::zeros(vec![2]).unwrap();
        let g = Tensor::zeros(vec![3]).unwrap();
        assert!(state.step([(&mut p, Some(&g))]).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
