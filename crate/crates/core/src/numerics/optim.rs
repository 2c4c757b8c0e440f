use super::params::{Grads, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction and decoupled weight decay.
///
/// Weight decay applies to matrices only; vectors (biases, norm gains) are
/// left undecayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len(), self.m.len()],
            });
        }
        for id in params.ids() {
            if grads.get(id).shape() != params.get(id).shape() || self.m[id.0].shape() != params.get(id).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: grads.get(id).shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let decay = if params.get(id).shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * p[i]);
            }
        }
        Ok(())
    }
}
