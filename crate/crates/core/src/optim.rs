//! AdamW with decoupled weight decay applied before the moment update.

use gpp_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

impl AdamW {
    pub fn step<T: Scalar>(&self, params: &mut ParamSet<T>, grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
        let n = params.len();
        if grads.len() != n || state.m.len() != n || state.v.len() != n {
            return Err(CoreError::Validation(format!(
                "optimizer mismatch: {n} params, {} grads, {} state slots",
                grads.len(),
                state.m.len()
            )));
        }
        for (i, p) in params.tensors().iter().enumerate() {
            let shape = p.shape();
            if grads[i].shape() != shape || state.m[i].shape() != shape || state.v[i].shape() != shape {
                return Err(CoreError::Validation(format!("optimizer shape mismatch at tensor {i}")));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::lit(1.0 - self.beta1.powi(t)), T::lit(1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                *w *= decay;
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
