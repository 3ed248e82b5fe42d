use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Real;

const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const ELU_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Identity; used for logits.
    Linear,
    Relu,
    Relu6,
    Elu,
    Selu,
    Softplus,
    Softsign,
    Sigmoid,
    Tanh,
}

impl Activation {
    /// The eight nonlinearities the ablation harness compares.
    pub const ALL: [Activation; 8] = [
        Activation::Relu,
        Activation::Relu6,
        Activation::Elu,
        Activation::Selu,
        Activation::Softplus,
        Activation::Softsign,
        Activation::Sigmoid,
        Activation::Tanh,
    ];

    pub fn apply<T: Real>(self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(zero),
            Activation::Relu6 => x.max(zero).min(T::of(6.0)),
            Activation::Elu => {
                if x > zero {
                    x
                } else {
                    T::of(ELU_ALPHA) * x.exp_m1()
                }
            }
            Activation::Selu => {
                let inner = if x > zero {
                    x
                } else {
                    T::of(SELU_ALPHA) * x.exp_m1()
                };
                T::of(SELU_SCALE) * inner
            }
            Activation::Softplus => x.max(zero) + (-x.abs()).exp().ln_1p(),
            Activation::Softsign => x / (one + x.abs()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `x`. ReLU and ReLU6
    /// have derivative 0 at their kinks.
    pub fn derivative<T: Real>(self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            Activation::Linear => one,
            Activation::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Activation::Relu6 => {
                if x > zero && x < T::of(6.0) {
                    one
                } else {
                    zero
                }
            }
            Activation::Elu => {
                if x > zero {
                    one
                } else {
                    T::of(ELU_ALPHA) * x.exp()
                }
            }
            Activation::Selu => {
                if x > zero {
                    T::of(SELU_SCALE)
                } else {
                    T::of(SELU_SCALE * SELU_ALPHA) * x.exp()
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Softsign => {
                let d = one + x.abs();
                one / (d * d)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (one - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                one - t * t
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Elu => "elu",
            Activation::Selu => "selu",
            Activation::Softplus => "softplus",
            Activation::Softsign => "softsign",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        };
        f.write_str(name)
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(Activation::Linear)
            .chain(Activation::ALL)
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown activation `{s}`"))
    }
}
