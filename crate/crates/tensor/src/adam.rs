use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update. Every gradient is checked for
    /// finiteness before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient { name: name.clone() });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let corr1 = T::from_f64c(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64c(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
        let (lr, eps) = (T::from_f64c(c.lr), T::from_f64c(c.eps));
        let one = T::one();

        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = b1 * md[k] + (one - b1) * gk;
                vd[k] = b2 * vd[k] + (one - b2) * gk * gk;
                let mhat = md[k] / corr1;
                let vhat = vd[k] / corr2;
                pd[k] = pd[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
