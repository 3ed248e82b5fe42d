//! A small dense-tensor CNN engine: convolution, max-pooling, locally
//! connected, dense and dropout layers, eight activations, sparse softmax
//! cross entropy, five first-order optimizers, reverse-mode gradients.
//!
//! Examples are processed one at a time in channels-first layout; a batch
//! gradient is the mean of per-example gradients, reduced in input order.

mod activation;
mod architecture;
mod loss;
mod network;
mod optimizer;
mod tensor;
mod train;

use std::fmt::Debug;
use std::iter::Sum;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use activation::Activation;
pub use architecture::Architecture;
pub use loss::{softmax, sparse_softmax_cross_entropy};
pub use network::{
    backward, forward, forward_logits, initialize, LayerSpec, Mode, NetworkSpec, Padding, Params,
    Shape,
};
pub use optimizer::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::Tensor;
pub use train::{
    argmax, fit, predict_batch, Checkpoint, FitConfig, FitOutcome, Prediction, TrainedModel,
    CHECKPOINT_VERSION,
};

/// Floating-point element type of the engine.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + Serialize
    + DeserializeOwned
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}
