use serde::{Deserialize, Serialize};

use super::config::{OptimConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam or SGD with momentum over every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub step: u64,
    /// Adam first moments, or SGD velocity.
    pub first: Vec<Tensor<T>>,
    /// Adam second moments; empty for SGD.
    pub second: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub step: u64,
    pub buffers: usize,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            kind: cfg.name,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            step: 0,
            first: zeros(),
            second: if cfg.name == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
        }
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.weight_decay);
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
        let bc1 = T::from_f64(1.0 - BETA1.powi(t));
        let bc2 = T::from_f64(1.0 - BETA2.powi(t));
        let mom = T::from_f64(self.momentum);
        let eps = T::from_f64(ADAM_EPS);
        for (i, (param, grad)) in store.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let w = param.value.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::Adam => {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for j in 0..w.len() {
                        let gj = g[j] + wd * w[j];
                        m[j] = b1 * m[j] + (T::ONE - b1) * gj;
                        v[j] = b2 * v[j] + (T::ONE - b2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        w[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd => {
                    let vel = self.first[i].data_mut();
                    for j in 0..w.len() {
                        let gj = g[j] + wd * w[j];
                        vel[j] = mom * vel[j] + gj;
                        w[j] -= lr * vel[j];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> OptimizerMeta {
        OptimizerMeta {
            kind: self.kind,
            step: self.step,
            buffers: self.first.len() + self.second.len(),
        }
    }
}
