//! Reference architectures for 28×28 single-channel digits.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::grouping::{DenseGrouping, GroupingMode};
use crate::nn::layer::LayerSpec;
use crate::nn::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Arch {
    #[default]
    Mlp,
    Lenet,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Lenet => "lenet",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "lenet" => Ok(Arch::Lenet),
            other => Err(Error::Config(format!("unknown arch `{other}` (expected mlp or lenet)"))),
        }
    }
}

impl Arch {
    pub fn build(self) -> Network {
        match self {
            Arch::Mlp => build_mlp(),
            Arch::Lenet => build_lenet(),
        }
    }

    /// Per-sample input shape the architecture expects.
    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Arch::Mlp => vec![784],
            Arch::Lenet => vec![1, 28, 28],
        }
    }
}

/// 784–500–300–10 perceptron. Each neuron's group is its outgoing weights,
/// so the first weight matrix carries one group per input pixel.
pub fn build_mlp() -> Network {
    Network::new(
        vec![784],
        vec![
            LayerSpec::Dense { inputs: 784, outputs: 500 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 500, outputs: 300 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 300, outputs: 10 },
            LayerSpec::Softmax,
        ],
    )
    .expect("static architecture")
    .with_grouping(GroupingMode::Structured, DenseGrouping::Outgoing)
}

/// LeNet-5 (Caffe variant): conv20·5×5 → pool → conv50·5×5 → pool →
/// dense 800→500 → relu → dense 500→10. Groups are output channels and
/// output neurons.
pub fn build_lenet() -> Network {
    Network::new(
        vec![1, 28, 28],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 20,
                kernel: 5,
                stride: 1,
                pad: 0,
            },
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 20,
                out_channels: 50,
                kernel: 5,
                stride: 1,
                pad: 0,
            },
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 800, outputs: 500 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 500, outputs: 10 },
            LayerSpec::Softmax,
        ],
    )
    .expect("static architecture")
    .with_grouping(GroupingMode::Structured, DenseGrouping::Incoming)
}
