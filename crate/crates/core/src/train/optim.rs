//! First-order optimizers over named parameter stores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::denoiser::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain or momentum SGD.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// SGD momentum; 0 disables it.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn plain_sgd() -> Self {
        Self {
            momentum: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta1/beta2", "must be in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::param("eps/clip_norm", "eps must be > 0 and clip_norm >= 0"));
        }
        Ok(())
    }
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.steps += 1;
        let scale = if self.cfg.clip_norm > 0.0 {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|&x| {
                    let x = x.to_f64().unwrap_or(f64::NAN);
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_norm {
                self.cfg.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let lr_t = T::lit(lr);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            g.expect_shape(p.shape(), name)?;
            let gs = |k: usize| g.data()[k] * T::lit(scale);
            match self.cfg.kind {
                OptimizerKind::Sgd if self.cfg.momentum == 0.0 => {
                    for (k, v) in p.data_mut().iter_mut().enumerate() {
                        *v -= lr_t * gs(k);
                    }
                }
                OptimizerKind::Sgd => {
                    let mu = T::lit(self.cfg.momentum);
                    let buf = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (k, (v, m)) in p.data_mut().iter_mut().zip(buf.data_mut()).enumerate() {
                        *m = mu * *m + gs(k);
                        *v -= lr_t * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let bc1 = 1.0 - b1.powi(self.steps as i32);
                    let bc2 = 1.0 - b2.powi(self.steps as i32);
                    let step = T::lit(lr / bc1);
                    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
                    let inv_bc2 = T::lit(1.0 / bc2);
                    let eps = T::lit(self.cfg.eps);
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let s = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (k, ((v, mk), sk)) in p.data_mut().iter_mut().zip(m.data_mut()).zip(s.data_mut()).enumerate() {
                        let gk = gs(k);
                        *mk = b1t * *mk + (T::one() - b1t) * gk;
                        *sk = b2t * *sk + (T::one() - b2t) * gk * gk;
                        *v -= step * *mk / ((*sk * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
