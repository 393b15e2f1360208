use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. One moment buffer pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Zeroed moments shaped after `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (vec![S::zero(); p.numel()], vec![S::zero(); p.numel()]))
            .unzip();
        Self {
            config,
            step_count: 0,
            first_moment: m,
            second_moment: v,
        }
    }

    /// One update. Each parameter's gradient is read from its `grad` buffer;
    /// a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "adam state tracks {} tensors, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.first_moment[i].len() {
                return Err(Error::shape(format!(
                    "adam moment {i} has {} elements, parameter has {}",
                    self.first_moment[i].len(),
                    p.numel()
                )));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(S::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + eps);
            }
            p.grad = grad;
        }
        Ok(())
    }
}
