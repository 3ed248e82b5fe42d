use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Params, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adagrad,
    Rmsprop,
    Ftrl,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Adagrad,
        OptimizerKind::Rmsprop,
        OptimizerKind::Ftrl,
    ];

    fn slot_count(self) -> usize {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Momentum | OptimizerKind::Adagrad | OptimizerKind::Rmsprop => 1,
            OptimizerKind::Ftrl => 2,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Ftrl => "ftrl",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown optimizer `{s}`"))
    }
}

/// Update rule and its hyperparameters.
///
/// * SGD: `theta -= lr * g`
/// * Momentum: `v = mu * v + g; theta -= lr * v`
/// * AdaGrad: `a += g^2; theta -= lr * g / (sqrt(a) + eps)`
/// * RMSProp: `a = rho * a + (1 - rho) * g^2; theta -= lr * g / (sqrt(a) + eps)`
/// * FTRL-Proximal, per coordinate with accumulator `n` and linear term `z`:
///   `sigma = (sqrt(n + g^2) - sqrt(n)) / lr; z += g - sigma * theta; n += g^2;`
///   `theta = 0` if `|z| <= l1`, else `(sign(z) * l1 - z) / ((beta + sqrt(n)) / lr + 2 * l2)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub ftrl_l1: f64,
    pub ftrl_l2: f64,
    pub ftrl_beta: f64,
    pub ftrl_initial_accumulator: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            learning_rate: 1e-4,
            momentum: 0.9,
            decay: 0.9,
            epsilon: 1e-10,
            ftrl_l1: 0.0,
            ftrl_l2: 0.0,
            ftrl_beta: 0.0,
            ftrl_initial_accumulator: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerConfig {
            kind,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Argument("momentum and decay must lie in [0, 1)".into()));
        }
        if self.epsilon < 0.0 || self.ftrl_l1 < 0.0 || self.ftrl_l2 < 0.0 || self.ftrl_beta < 0.0 {
            return Err(Error::Argument("epsilon and FTRL terms must be non-negative".into()));
        }
        if self.kind == OptimizerKind::Ftrl && self.ftrl_initial_accumulator <= 0.0 && self.ftrl_beta == 0.0 {
            return Err(Error::Argument(
                "FTRL needs a positive initial accumulator or beta".into(),
            ));
        }
        Ok(())
    }
}

/// Accumulator slots mirroring the parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    /// `slots[i][s]` is slot `s` of the `i`-th parameter tensor.
    pub slots: Vec<Vec<Tensor<T>>>,
    pub steps: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &Params<T>) -> Result<Self> {
        config.validate()?;
        let slots = params
            .tensors()
            .map(|t| match config.kind {
                OptimizerKind::Ftrl => vec![
                    t.zeros_like(),
                    Tensor::filled(t.shape(), T::of(config.ftrl_initial_accumulator)),
                ],
                kind => (0..kind.slot_count()).map(|_| t.zeros_like()).collect(),
            })
            .collect();
        Ok(OptimizerState {
            config,
            slots,
            steps: 0,
        })
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<()> {
        let shapes_agree = params.tensors().count() == self.slots.len()
            && params.tensors().count() == grads.tensors().count()
            && params
                .tensors()
                .zip(grads.tensors())
                .all(|(p, g)| p.shape() == g.shape());
        if !shapes_agree {
            return Err(Error::Shape(
                "parameters, gradients and optimizer slots disagree".into(),
            ));
        }
        let cfg = &self.config;
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.epsilon);
        let mu = T::of(cfg.momentum);
        let rho = T::of(cfg.decay);
        let one = T::one();
        for ((param, grad), slots) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.slots.iter_mut())
        {
            let theta = param.data_mut();
            let g = grad.data();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (t, &g) in theta.iter_mut().zip(g) {
                        *t = *t - lr * g;
                    }
                }
                OptimizerKind::Momentum => {
                    let v = slots[0].data_mut();
                    for ((t, &g), v) in theta.iter_mut().zip(g).zip(v) {
                        *v = mu * *v + g;
                        *t = *t - lr * *v;
                    }
                }
                OptimizerKind::Adagrad => {
                    let a = slots[0].data_mut();
                    for ((t, &g), a) in theta.iter_mut().zip(g).zip(a) {
                        *a = *a + g * g;
                        *t = *t - lr * g / (a.sqrt() + eps);
                    }
                }
                OptimizerKind::Rmsprop => {
                    let a = slots[0].data_mut();
                    for ((t, &g), a) in theta.iter_mut().zip(g).zip(a) {
                        *a = rho * *a + (one - rho) * g * g;
                        *t = *t - lr * g / (a.sqrt() + eps);
                    }
                }
                OptimizerKind::Ftrl => {
                    let l1 = T::of(cfg.ftrl_l1);
                    let two_l2 = T::of(2.0 * cfg.ftrl_l2);
                    let beta = T::of(cfg.ftrl_beta);
                    let (z_slot, n_slot) = slots.split_at_mut(1);
                    let z = z_slot[0].data_mut();
                    let n = n_slot[0].data_mut();
                    for (((t, &g), z), n) in theta.iter_mut().zip(g).zip(z).zip(n) {
                        let n_new = *n + g * g;
                        let sigma = (n_new.sqrt() - n.sqrt()) / lr;
                        *z = *z + g - sigma * *t;
                        *n = n_new;
                        *t = if z.abs() <= l1 {
                            T::zero()
                        } else {
                            (z.signum() * l1 - *z) / ((beta + n.sqrt()) / lr + two_l2)
                        };
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}
