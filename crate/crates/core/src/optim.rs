//! Adam with bias correction and additive decoupled weight decay. The decay
//! term λ·θ is added to the gradient before the moment updates rather than
//! being folded into the loss, so regularizer losses never double-count it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-4,
        }
    }
}

#[derive(Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    t: u64,
    moments: Option<Vec<Moment>>,
}

#[derive(Debug)]
struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            t: 0,
            moments: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Learning-rate decay hook; moments are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over the full parameter list. The list must be the same
    /// (order and shapes) on every call for a given state. Parameters whose
    /// grad slot is empty are skipped: no gradient reached them this step.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        let moments = match &mut self.moments {
            Some(m) => {
                if m.len() != params.len() {
                    return Err(Error::OptimizerStateMismatch {
                        state: m.len(),
                        params: params.len(),
                    });
                }
                m
            }
            None => self.moments.insert(
                params
                    .iter()
                    .map(|(_, p)| Moment {
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                    })
                    .collect(),
            ),
        };
        self.t += 1;
        let t = self.t;
        let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);

        for ((name, param), moment) in params.iter_mut().zip(moments.iter_mut()) {
            if moment.m.len() != param.len() {
                return Err(Error::OptimizerStateMismatch {
                    state: moment.m.len(),
                    params: param.len(),
                });
            }
            let Some(grad) = param.grad() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad {
                    param: name.clone(),
                    step: t,
                });
            }
            let grad = grad.to_vec();
            let values = param.values_mut();
            for i in 0..values.len() {
                let g = grad[i] + self.cfg.weight_decay * values[i];
                moment.m[i] = self.cfg.beta1 * moment.m[i] + (1.0 - self.cfg.beta1) * g;
                moment.v[i] = self.cfg.beta2 * moment.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = moment.m[i] / bc1;
                let v_hat = moment.v[i] / bc2;
                values[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
