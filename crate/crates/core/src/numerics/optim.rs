use super::params::{ParamId, ParamStore};
use super::tensor::{Float, Tensor};
use std::collections::BTreeMap;

/// Adam with constant learning rate and fixed moment hyperparameters.
#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    /// Frozen parameters and parameters without gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let bc2 = T::from_f64_lossy(bc2);
        let eps = T::from_f64_lossy(self.eps);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let w = p.tensor.data_mut();
            for (((wi, &gi), mi), vi) in w
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let denom = (*vi / bc2).sqrt() + eps;
                *wi -= step_size * *mi / denom;
            }
        }
    }
}
