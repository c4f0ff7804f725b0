//! Self-checks: analytic gradients against central differences, and the
//! variance decomposition of the additive random vector.

use crate::error::Result;
use crate::gasl::verify_variance_decomposition;
use crate::nn::{DenseGrouping, GroupingMode, LayerSpec, Network, Params};
use crate::regularizers::{attention_variance, composite_objective, group_lasso_penalty, ObjectiveConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Components whose group norm is below this are not checked: the norm is
/// not differentiable at zero.
pub const NORM_EXCLUSION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: &'static str,
    pub instances: usize,
    pub checked: usize,
    /// Components skipped because a perturbation changed a ReLU or max-pool
    /// branch, or sat near a zero group norm.
    pub skipped: usize,
    /// Largest `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over instances.
    pub max_rel_error: f64,
}

/// A random network with at most a few hundred parameters; even `variant`s
/// are dense, odd ones convolutional.
pub fn random_instance(rng: &mut RngStream, variant: usize) -> (Network, Tensor, Vec<usize>) {
    let (input, layers) = if variant.is_multiple_of(2) {
        let (a, b, c) = (3 + rng.below(5), 3 + rng.below(6), 2 + rng.below(4));
        (
            vec![a],
            vec![
                LayerSpec::Dense { inputs: a, outputs: b },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: b, outputs: c },
                LayerSpec::Softmax,
            ],
        )
    } else {
        let (cin, cout, classes) = (1 + rng.below(2), 2 + rng.below(3), 2 + rng.below(3));
        (
            vec![cin, 6, 6],
            vec![
                LayerSpec::Conv2d {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: cout * 4,
                    outputs: classes,
                },
                LayerSpec::Softmax,
            ],
        )
    };
    let dense = if rng.below(2) == 0 { DenseGrouping::Outgoing } else { DenseGrouping::Incoming };
    let mode = if variant % 4 < 2 { GroupingMode::Structured } else { GroupingMode::Unstructured };
    let mut net = Network::new(input.clone(), layers).expect("valid instance").with_grouping(mode, dense);
    for t in net.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, 0.7));
    }
    let batch = 2 + rng.below(3);
    let mut shape = vec![batch];
    shape.extend(&input);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.standard_normal()).collect()).expect("finite");
    let classes = net.num_classes();
    let labels = (0..batch).map(|_| rng.below(classes)).collect();
    (net, x, labels)
}

/// Norm of the group each flat parameter belongs to; biases get +∞.
fn group_norm_of_each(net: &Network) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    for (layer, p) in net.params().iter() {
        let layout = net.group_layout(layer, net.grouping()).expect("weighted layer");
        let norms = layout.norms(p.weight.data());
        out.extend((0..p.weight.len()).map(|i| norms[layout.group_of(i)]));
        out.extend(std::iter::repeat_n(f64::INFINITY, p.bias.len()));
    }
    out
}

struct Term {
    name: &'static str,
    value: fn(&Network, &Tensor, &[usize]) -> Result<f64>,
    grad: fn(&Network, &Tensor, &[usize]) -> Result<Params>,
    uses_norms: bool,
}

fn terms() -> Vec<Term> {
    vec![
        Term {
            name: "cross_entropy",
            value: |n, x, y| n.loss(x, y),
            grad: |n, x, y| {
                let (_, cache) = n.forward(x)?;
                Ok(n.backward(&cache, y)?.1)
            },
            uses_norms: false,
        },
        Term {
            name: "l2",
            value: |n, _, _| Ok(n.params().norm_sq()),
            grad: |n, _, _| {
                let mut g = n.params().zeros_like();
                g.axpy(2.0, n.params())?;
                Ok(g)
            },
            uses_norms: false,
        },
        Term {
            name: "group_lasso",
            value: |n, _, _| Ok(group_lasso_penalty(n, n.grouping(), 1e-8).0),
            grad: |n, _, _| Ok(group_lasso_penalty(n, n.grouping(), 1e-8).1),
            uses_norms: true,
        },
        Term {
            name: "attention_variance",
            value: |n, _, _| Ok(attention_variance(n, n.grouping(), 1e-8).0),
            grad: |n, _, _| Ok(attention_variance(n, n.grouping(), 1e-8).1),
            uses_norms: true,
        },
        Term {
            name: "composite",
            value: |n, x, y| Ok(composite_objective(n, x, y, &composite_cfg(n))?.0.total),
            grad: |n, x, y| Ok(composite_objective(n, x, y, &composite_cfg(n))?.1),
            uses_norms: true,
        },
    ]
}

fn composite_cfg(net: &Network) -> ObjectiveConfig {
    ObjectiveConfig {
        lambda_s: 0.05,
        alpha: 0.01,
        lambda_l2: 1e-3,
        grouping_mode: net.grouping(),
        ..Default::default()
    }
}

/// Runs every term over `instances` random networks derived from `seed`.
pub fn gradient_check(seed: u64, instances: usize) -> Result<Vec<TermCheck>> {
    let terms = terms();
    let mut results: Vec<TermCheck> = terms
        .iter()
        .map(|t| TermCheck {
            term: t.name,
            instances,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let mut rng = RngStream::new(seed);
    for k in 0..instances {
        let (net, x, y) = random_instance(&mut rng, k);
        let base_pattern = net.branch_pattern(&net.forward(&x)?.1);
        let norms = group_norm_of_each(&net);
        let theta = net.params().to_flat();
        for (t, res) in terms.iter().zip(results.iter_mut()) {
            let analytic = (t.grad)(&net, &x, &y)?.to_flat();
            let mut probe = net.clone();
            let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
            for i in 0..theta.len() {
                if t.uses_norms && norms[i] < NORM_EXCLUSION {
                    res.skipped += 1;
                    continue;
                }
                let mut eval = |delta: f64| -> Result<(f64, bool)> {
                    let mut p = theta.clone();
                    p[i] += delta;
                    probe.params_mut().set_flat(&p)?;
                    let same = probe.branch_pattern(&probe.forward(&x)?.1) == base_pattern;
                    Ok(((t.value)(&probe, &x, &y)?, same))
                };
                let (fp, same_p) = eval(FD_STEP)?;
                let (fm, same_m) = eval(-FD_STEP)?;
                if !(same_p && same_m) {
                    res.skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                diff_sq += (analytic[i] - numeric).powi(2);
                a_sq += analytic[i].powi(2);
                n_sq += numeric.powi(2);
                res.checked += 1;
            }
            let scale = a_sq.max(n_sq).sqrt();
            if scale > 0.0 {
                res.max_rel_error = res.max_rel_error.max(diff_sq.sqrt() / scale);
            }
        }
    }
    Ok(results)
}

/// A random symmetric positive-definite matrix `AᵀA/n + I`.
pub fn random_spd(rng: &mut RngStream, n: usize) -> Tensor {
    let a = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.standard_normal()).collect()).expect("finite");
    let mut m = a.transpose().expect("square").matmul(&a).expect("square").scale(1.0 / n as f64);
    for i in 0..n {
        let v = m.at(&[i, i]);
        m.set(&[i, i], v + 1.0);
    }
    m
}

/// Largest residual of the variance decomposition over `sets` random
/// `(k, n)` sample sets, per mixing matrix (identity, 2·identity, random SPD).
pub fn decomposition_check(seed: u64, sets: usize, k: usize, n: usize) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = RngStream::new(seed);
    let mut worst = [("identity", 0.0f64), ("2*identity", 0.0), ("random_spd", 0.0)];
    for _ in 0..sets {
        let v = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.normal(1.0, 2.0)).collect())?;
        let beta: Vec<f64> = (0..k * n).map(|_| (0.1 + rng.standard_normal()).exp()).collect();
        let vr = Tensor::new(vec![k, n], v.data().iter().zip(&beta).map(|(a, b)| a * b).collect())?;
        let ms = [Tensor::identity(n), Tensor::identity(n).scale(2.0), random_spd(&mut rng, n)];
        for (slot, m) in worst.iter_mut().zip(ms.iter()) {
            slot.1 = slot.1.max(verify_variance_decomposition(&v, &vr, m)?);
        }
    }
    Ok(worst.to_vec())
}
