use crate::conv::{conv2d_backward, conv2d_forward, maxpool_backward, maxpool_forward, Conv2dGeometry};
use crate::error::{Error, Result};
use crate::nn::grouping::{DenseGrouping, GroupLayout, GroupNormVector, GroupingMode, ParamGroupView};
use crate::nn::layer::LayerSpec;
use crate::rng::RngStream;
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weight and bias tensors for every parameterised layer, indexed by layer
/// position. Also used to carry gradients of the same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    layers: Vec<Option<LayerParams>>,
}

impl Params {
    pub fn layer(&self, i: usize) -> Option<&LayerParams> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut LayerParams> {
        self.layers.get_mut(i).and_then(Option::as_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.layers.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut LayerParams)> {
        self.layers.iter_mut().enumerate().filter_map(|(i, p)| p.as_mut().map(|p| (i, p)))
    }

    /// All tensors in canonical order: layer ascending, weight before bias.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.iter().flat_map(|(_, p)| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.iter_mut().flat_map(|(_, p)| [&mut p.weight, &mut p.bias])
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors().map(Tensor::norm_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// `self += k · other`
    pub fn axpy(&mut self, k: f64, other: &Params) -> Result<()> {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.axpy(k, b)?;
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape("Params::set_flat", &[flat.len()], &[self.len()]));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// A feed-forward network: an ordered layer list plus its parameters and the
/// grouping view used by the sparsity and attention penalties.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Params,
    grouping: GroupingMode,
    dense_grouping: DenseGrouping,
}

/// Activations saved by [`Network::forward`]; `acts[i]` is the input of layer `i`.
#[derive(Debug)]
pub struct ForwardCache {
    acts: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().expect("cache always holds the input")
    }
}

impl Network {
    /// Checks that adjacent layers fit together and allocates zero parameters.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if *layer == LayerSpec::Softmax && i + 1 != layers.len() {
                return Err(Error::Config("softmax must be the final layer".into()));
            }
            shape = layer.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!("network must end in a flat output, got {shape:?}")));
        }
        let params = Params {
            layers: layers
                .iter()
                .map(|l| {
                    l.weight_shape().map(|ws| LayerParams {
                        weight: Tensor::zeros(&ws),
                        bias: Tensor::zeros(&[l.bias_len().unwrap()]),
                    })
                })
                .collect(),
        };
        Ok(Network {
            input_shape,
            layers,
            params,
            grouping: GroupingMode::Structured,
            dense_grouping: DenseGrouping::Outgoing,
        })
    }

    pub fn with_grouping(mut self, grouping: GroupingMode, dense_grouping: DenseGrouping) -> Self {
        self.grouping = grouping;
        self.dense_grouping = dense_grouping;
        self
    }

    pub fn set_grouping(&mut self, grouping: GroupingMode) {
        self.grouping = grouping;
    }

    pub fn grouping(&self) -> GroupingMode {
        self.grouping
    }

    pub fn dense_grouping(&self) -> DenseGrouping {
        self.dense_grouping
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init_he(&mut self, rng: &mut RngStream) {
        for (i, p) in self.params.iter_mut() {
            let fan_in = match self.layers[i] {
                LayerSpec::Dense { inputs, .. } => inputs,
                LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
                _ => unreachable!("only parameterised layers carry params"),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            p.weight.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, std));
            p.bias.data_mut().fill(0.0);
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Per-sample shape at every layer boundary; entry `i` is the input of layer `i`.
    pub fn boundary_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l.output_shape(shapes.last().unwrap()).expect("validated at construction");
            shapes.push(next);
        }
        shapes
    }

    pub fn num_classes(&self) -> usize {
        self.boundary_shapes().last().unwrap()[0]
    }

    /// Indices of layers that carry weights (and therefore groups).
    pub fn groupable_layers(&self) -> Vec<usize> {
        self.params.iter().map(|(i, _)| i).collect()
    }

    pub fn group_layout(&self, layer: usize, mode: GroupingMode) -> Option<GroupLayout> {
        let spec = self.layers.get(layer)?;
        let len = spec.weight_shape()?.iter().product();
        if mode == GroupingMode::Unstructured {
            return Some(GroupLayout::Singletons { len });
        }
        Some(match *spec {
            LayerSpec::Dense { inputs, outputs } => match self.dense_grouping {
                DenseGrouping::Outgoing => GroupLayout::Rows {
                    groups: inputs,
                    width: outputs,
                },
                DenseGrouping::Incoming => GroupLayout::Columns {
                    rows: inputs,
                    groups: outputs,
                },
            },
            LayerSpec::Conv2d { out_channels, .. } => GroupLayout::Rows {
                groups: out_channels,
                width: len / out_channels,
            },
            _ => unreachable!(),
        })
    }

    fn layout_or_err(&self, layer: usize) -> Result<GroupLayout> {
        self.group_layout(layer, self.grouping).ok_or(Error::Query { layer })
    }

    pub fn group_views(&self, layer: usize) -> Result<Vec<ParamGroupView>> {
        let layout = self.layout_or_err(layer)?;
        Ok((0..layout.group_count())
            .map(|j| ParamGroupView {
                layer_index: layer,
                group_index: j,
                member_indices: layout.member_indices(j),
            })
            .collect())
    }

    pub fn group_norms(&self, layer: usize) -> Result<GroupNormVector> {
        let layout = self.layout_or_err(layer)?;
        let w = self.params.layer(layer).unwrap().weight.data();
        let norms = layout.norms(w);
        let n = norms.len();
        Ok(GroupNormVector {
            layer_index: layer,
            norms: Tensor::from_parts(vec![n], norms),
        })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut want = vec![0];
            want.extend(&self.input_shape);
            return Err(Error::shape("forward", shape, &want));
        }
        Ok(shape[0])
    }

    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let b = self.check_batch(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = vec![None; self.layers.len()];
        acts.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let y = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let p = self.params.layer(i).unwrap();
                    let mut out = Vec::with_capacity(b * outputs);
                    for _ in 0..b {
                        out.extend_from_slice(p.bias.data());
                    }
                    gemm(b, inputs, outputs, 1.0, Mat::rows(x.data(), inputs), Mat::rows(p.weight.data(), outputs), 1.0, &mut out);
                    Tensor::from_parts(vec![b, outputs], out)
                }
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let p = self.params.layer(i).unwrap();
                    conv2d_forward(x, &p.weight, Some(&p.bias), Conv2dGeometry { stride, pad })?
                }
                LayerSpec::MaxPool { size, stride } => {
                    let (y, arg) = maxpool_forward(x, size, stride)?;
                    pool_argmax[i] = Some(arg);
                    y
                }
                LayerSpec::Relu => x.map(|v| v.max(0.0)),
                LayerSpec::Flatten => {
                    let per: usize = x.shape()[1..].iter().product();
                    x.clone().reshape(&[b, per])?
                }
                LayerSpec::Softmax => break,
            };
            acts.push(y);
        }
        let logits = acts.last().unwrap().clone();
        Ok((logits, ForwardCache { acts, pool_argmax }))
    }

    /// Mean softmax cross-entropy of the cached logits and its gradient with
    /// respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Params)> {
        let (loss, mut grad) = softmax_cross_entropy(cache.logits(), labels)?;
        let mut grads = self.params.zeros_like();
        let last = cache.acts.len() - 1;
        for i in (0..last).rev() {
            let x = &cache.acts[i];
            let need_input_grad = i > 0;
            grad = match self.layers[i] {
                LayerSpec::Dense { inputs, outputs } => {
                    let b = x.shape()[0];
                    let p = self.params.layer(i).unwrap();
                    let g = grads.layer_mut(i).unwrap();
                    gemm(inputs, b, outputs, 1.0, Mat::transposed(x.data(), inputs), Mat::rows(grad.data(), outputs), 0.0, g.weight.data_mut());
                    g.bias = grad.sum_rows()?;
                    if !need_input_grad {
                        break;
                    }
                    let mut dx = vec![0.0; b * inputs];
                    gemm(b, outputs, inputs, 1.0, Mat::rows(grad.data(), outputs), Mat::transposed(p.weight.data(), outputs), 0.0, &mut dx);
                    Tensor::from_parts(vec![b, inputs], dx)
                }
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let p = self.params.layer(i).unwrap();
                    let cg = conv2d_backward(x, &p.weight, &grad, Conv2dGeometry { stride, pad })?;
                    let g = grads.layer_mut(i).unwrap();
                    g.weight = cg.kernel;
                    g.bias = cg.bias;
                    cg.input
                }
                LayerSpec::MaxPool { .. } => maxpool_backward(&grad, cache.pool_argmax[i].as_ref().unwrap(), x.shape()),
                LayerSpec::Relu => {
                    let y = &cache.acts[i + 1];
                    grad.zip_map(y, "relu_backward", |g, y| if y > 0.0 { g } else { 0.0 })?
                }
                LayerSpec::Flatten => grad.reshape(x.shape())?,
                LayerSpec::Softmax => grad,
            };
        }
        Ok((loss, grads))
    }

    /// ReLU on/off flags and max-pool winners recorded in `cache`. Two
    /// parameter settings with equal patterns lie in the same smooth piece.
    pub fn branch_pattern(&self, cache: &ForwardCache) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Relu => out.extend(cache.acts[i + 1].data().iter().map(|&v| (v > 0.0) as usize)),
                LayerSpec::MaxPool { .. } => out.extend_from_slice(cache.pool_argmax[i].as_ref().unwrap()),
                _ => {}
            }
        }
        out
    }

    /// Mean cross-entropy of a batch without computing gradients.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward(batch)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(batch)?;
        let c = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Row-wise softmax of `[batch, classes]` logits, max-shifted.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Mean cross-entropy over the batch via log-sum-exp, and its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::shape("cross_entropy labels", &[labels.len()], &[b]));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    for ((row, probs), &y) in logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).zip(labels) {
        // log-sum-exp as m + ln(1 + rest) and p_y - 1 as -(sum of the other
        // probabilities), so both stay accurate when one class dominates
        let (top, m) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
        let rest: f64 = row.iter().enumerate().filter(|&(k, _)| k != top).map(|(_, v)| (v - m).exp()).sum();
        loss += (m - row[y]) + rest.ln_1p();
        probs[y] = -probs.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, p)| p).sum::<f64>();
        probs.iter_mut().for_each(|p| *p /= b as f64);
    }
    Ok((loss / b as f64, grad))
}
