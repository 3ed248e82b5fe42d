use serde::{Deserialize, Serialize};

use super::{Activation, LayerSpec, NetworkSpec, Padding};
use crate::error::Result;

/// Compact description of the classifier stack:
/// two conv + max-pool blocks, a locally connected layer, a dense layer,
/// dropout and the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub conv_filters: usize,
    pub conv_kernel: (usize, usize),
    pub pool_kernel: (usize, usize),
    /// Zero drops the locally connected layer.
    pub local_filters: usize,
    pub local_kernel: (usize, usize),
    pub dense_units: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            conv_filters: 200,
            conv_kernel: (6, 12),
            pool_kernel: (2, 2),
            local_filters: 32,
            local_kernel: (3, 3),
            dense_units: 512,
            dropout: 0.4,
            activation: Activation::Selu,
        }
    }
}

impl Architecture {
    /// Concrete network for a `height x width` input and `classes` outputs.
    pub fn build(&self, input: (usize, usize), classes: usize) -> Result<NetworkSpec> {
        let mut layers = Vec::with_capacity(8);
        for _ in 0..2 {
            layers.push(LayerSpec::Conv {
                filters: self.conv_filters,
                kernel: self.conv_kernel,
                padding: Padding::Same,
                activation: self.activation,
            });
            layers.push(LayerSpec::MaxPool {
                kernel: self.pool_kernel,
            });
        }
        if self.local_filters > 0 {
            layers.push(LayerSpec::LocallyConnected {
                filters: self.local_filters,
                kernel: self.local_kernel,
                activation: self.activation,
            });
        }
        layers.push(LayerSpec::Dense {
            units: self.dense_units,
            activation: self.activation,
        });
        if self.dropout > 0.0 {
            layers.push(LayerSpec::Dropout { rate: self.dropout });
        }
        layers.push(LayerSpec::Output { classes });
        let spec = NetworkSpec { input, layers };
        spec.shapes()?;
        Ok(spec)
    }
}
