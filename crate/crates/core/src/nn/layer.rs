use crate::conv::conv_out_extent;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected; weight shape `[inputs, outputs]`, bias `[outputs]`.
    Dense { inputs: usize, outputs: usize },
    /// Weight shape `[out_channels, in_channels, kernel, kernel]`, bias `[out_channels]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool { size: usize, stride: usize },
    Relu,
    Flatten,
    /// Terminal marker: logits feed a softmax + cross-entropy head.
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some(vec![inputs, outputs]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { outputs, .. } => Some(outputs),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: &[usize]| Error::shape(self.name(), input, want);
        match *self {
            LayerSpec::Dense { inputs, outputs } => match input {
                [n] if *n == inputs => Ok(vec![outputs]),
                _ => Err(mismatch(&[inputs])),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => match *input {
                [c, h, w] if c == in_channels => {
                    let ho = conv_out_extent(h, kernel, stride, pad).ok_or_else(|| mismatch(&[in_channels, kernel, kernel]))?;
                    let wo = conv_out_extent(w, kernel, stride, pad).ok_or_else(|| mismatch(&[in_channels, kernel, kernel]))?;
                    Ok(vec![out_channels, ho, wo])
                }
                _ => Err(mismatch(&[in_channels, 0, 0])),
            },
            LayerSpec::MaxPool { size, stride } => match *input {
                [c, h, w] => {
                    let ho = conv_out_extent(h, size, stride, 0).ok_or_else(|| mismatch(&[c, size, size]))?;
                    let wo = conv_out_extent(w, size, stride, 0).ok_or_else(|| mismatch(&[c, size, size]))?;
                    Ok(vec![c, ho, wo])
                }
                _ => Err(mismatch(&[0, size, size])),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }
}
