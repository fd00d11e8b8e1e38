//! SGD with momentum, Adam (coupled L2) and AdamW (decoupled decay).

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, Group};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config("optimizer coefficients out of range".into()));
        }
        Ok(())
    }
}

/// Optimizer state over a fixed set of parameter groups; parameters outside
/// those groups are never touched.
pub struct Optimizer<T: Scalar> {
    pub config: OptimizerConfig,
    groups: Vec<Group>,
    steps: u64,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, model: &Backbone<T>, groups: &[Group]) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<_> = model.params().into_iter().map(|(_, _, p)| p.value.dim()).collect();
        let zeros = |n: bool| {
            if n {
                shapes.iter().map(|&s| Array2::zeros(s)).collect()
            } else {
                Vec::new()
            }
        };
        let adaptive = config.kind != OptimizerKind::Sgd;
        Ok(Self {
            first: zeros(true),
            second: zeros(adaptive),
            config,
            groups: groups.to_vec(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, model: &mut Backbone<T>) {
        self.steps += 1;
        let c = &self.config;
        let lr = lit::<T>(c.learning_rate);
        let wd = lit::<T>(c.weight_decay);
        let t = self.steps as i32;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = lit::<T>(1.0 - c.beta1.powi(t));
        let bc2 = lit::<T>(1.0 - c.beta2.powi(t));
        let eps = lit::<T>(c.eps);
        let mu = lit::<T>(c.momentum);
        let one = T::one();
        for (i, (_, group, p)) in model.params_mut().into_iter().enumerate() {
            if !self.groups.contains(&group) {
                continue;
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    Zip::from(&mut p.value).and(&p.grad).and(&mut self.first[i]).for_each(|w, &g, buf| {
                        let g = g + wd * *w;
                        *buf = mu * *buf + g;
                        *w -= lr * *buf;
                    });
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let decoupled = c.kind == OptimizerKind::Adamw;
                    Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(&mut self.first[i])
                        .and(&mut self.second[i])
                        .for_each(|w, &g, m, v| {
                            let g = if decoupled {
                                *w -= lr * wd * *w;
                                g
                            } else {
                                g + wd * *w
                            };
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            let mhat = *m / bc1;
                            let vhat = *v / bc2;
                            *w -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
    }
}
