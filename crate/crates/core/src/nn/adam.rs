//! Adam with bias-corrected moments.

use super::model::{Grads, Model};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

impl<T: Scalar> Model<T> {
    /// One Adam update. Arithmetic is done in `f64` and rounded back.
    pub fn adam_step(&mut self, grads: &Grads<T>, lr: f64) -> Result<()> {
        let n = self.params().len();
        if grads.tensors.len() != n
            || self.adam.m.len() != n
            || grads
                .tensors
                .iter()
                .zip(self.params())
                .any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::Shape("gradient shapes do not match parameters".into()));
        }
        let t = self.adam.step + 1;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let mut state = std::mem::take(&mut self.adam);
        for (((p, g), m), v) in self
            .params_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let g = gv.as_f64();
                let m1 = BETA1 * mv.as_f64() + (1.0 - BETA1) * g;
                let v1 = BETA2 * vv.as_f64() + (1.0 - BETA2) * g * g;
                let upd = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + EPSILON);
                *mv = T::from_f64(m1);
                *vv = T::from_f64(v1);
                *pv = T::from_f64(pv.as_f64() - upd);
            }
        }
        state.step = t;
        self.adam = state;
        Ok(())
    }
}
