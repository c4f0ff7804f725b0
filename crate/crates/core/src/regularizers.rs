//! The composite training objective
//!
//! ```text
//! total = CE + λ_l2·‖θ‖² + λ_s·GL(w) + λ_v / (Ψ(w) + ε),    λ_v = α·λ_s
//! GL(w) = Σ_l (1/√M_l) Σ_j ‖w_j‖
//! Ψ(w)  = Σ_l (1/√M_l) · (1/M_l) Σ_j (‖w_j‖ − mean_k ‖w_k‖)²
//! ```
//!
//! where `w_j` ranges over the `M_l` groups of layer `l`. The gradient of a
//! group norm is taken as zero when the norm is below ε.

use crate::error::{Error, Result};
use crate::nn::{GroupLayout, GroupingMode, Network, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_s: f64,
    pub alpha: f64,
    pub lambda_l2: f64,
    pub grouping_mode: GroupingMode,
    /// When false the attention term is dropped (plain group lasso).
    pub attention: bool,
    pub variance_epsilon: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_s: 0.0,
            alpha: 1.0,
            lambda_l2: 5e-4,
            grouping_mode: GroupingMode::Structured,
            attention: true,
            variance_epsilon: 1e-8,
        }
    }
}

impl ObjectiveConfig {
    /// Attention coefficient, always derived from the sparsity coefficient.
    pub fn lambda_v(&self) -> f64 {
        if self.attention {
            self.alpha * self.lambda_s
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be a finite non-negative number, got {v}")))
            }
        };
        nonneg("lambda_s", self.lambda_s)?;
        nonneg("lambda_l2", self.lambda_l2)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.variance_epsilon > 0.0 && self.variance_epsilon.is_finite()) {
            return Err(Error::param(
                "variance_epsilon",
                format!("must be positive, got {}", self.variance_epsilon),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectiveBreakdown {
    pub data_loss: f64,
    /// `λ_l2·‖θ‖²`
    pub l2_term: f64,
    /// `λ_s·GL(w)`
    pub sparsity_term: f64,
    /// `λ_v / (Ψ + ε)`
    pub attention_term: f64,
    pub total: f64,
    /// Unweighted `GL(w)`.
    pub group_lasso: f64,
    /// Unweighted `Ψ(w)`.
    pub variance: f64,
}

impl ObjectiveBreakdown {
    /// Names the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("data_loss", self.data_loss),
            ("l2_term", self.l2_term),
            ("sparsity_term", self.sparsity_term),
            ("attention_term", self.attention_term),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-group multipliers that replace a layer's norm vector `v` with
/// `v + β⊙v − mean(β⊙v)` inside the attention term. `None` leaves the layer
/// untouched.
pub type NormPerturbation = Vec<Option<Vec<f64>>>;

struct LayerGroups {
    layer: usize,
    layout: GroupLayout,
    norms: Vec<f64>,
}

fn layer_groups(net: &Network, mode: GroupingMode) -> Vec<LayerGroups> {
    net.groupable_layers()
        .into_iter()
        .map(|layer| {
            let layout = net.group_layout(layer, mode).expect("groupable layer");
            let norms = layout.norms(net.params().layer(layer).unwrap().weight.data());
            LayerGroups { layer, layout, norms }
        })
        .collect()
}

fn perturbed(norms: &[f64], beta: Option<&Vec<f64>>) -> Vec<f64> {
    match beta {
        None => norms.to_vec(),
        Some(beta) => {
            let vr: Vec<f64> = norms.iter().zip(beta).map(|(v, b)| v * b).collect();
            let m = vr.iter().sum::<f64>() / vr.len() as f64;
            norms.iter().zip(&vr).map(|(v, r)| v + (r - m)).collect()
        }
    }
}

/// Layer variance contribution `(1/√M)·Var(values)` and its derivative with
/// respect to each value.
fn layer_variance(values: &[f64]) -> (f64, Vec<f64>) {
    let m = values.len();
    if m < 2 {
        return (0.0, vec![0.0; m]);
    }
    let mf = m as f64;
    let c = 1.0 / mf.sqrt();
    let mean = values.iter().sum::<f64>() / mf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
    let grad = values.iter().map(|v| c * 2.0 * (v - mean) / mf).collect();
    (c * var, grad)
}

/// `d‖w_j‖/dw = w/‖w_j‖`, so a coefficient on the norm becomes `coef/‖w_j‖`
/// on the weights; zero-norm groups get zero.
fn to_weight_coef(coef_on_norm: impl Iterator<Item = f64>, norms: &[f64], eps: f64) -> Vec<f64> {
    coef_on_norm
        .zip(norms)
        .map(|(c, &n)| if n < eps { 0.0 } else { c / n })
        .collect()
}

/// Group-lasso value and its gradient (zero on biases).
pub fn group_lasso_penalty(net: &Network, mode: GroupingMode, eps: f64) -> (f64, Params) {
    let mut grad = net.params().zeros_like();
    let mut total = 0.0;
    for g in layer_groups(net, mode) {
        let c = 1.0 / (g.norms.len() as f64).sqrt();
        total += c * g.norms.iter().sum::<f64>();
        let coef = to_weight_coef(std::iter::repeat(c), &g.norms, eps);
        let w = net.params().layer(g.layer).unwrap().weight.data();
        g.layout.accumulate(w, &coef, grad.layer_mut(g.layer).unwrap().weight.data_mut());
    }
    (total, grad)
}

/// Aggregated attention variance `Ψ` and its gradient.
pub fn attention_variance(net: &Network, mode: GroupingMode, eps: f64) -> (f64, Params) {
    attention_variance_perturbed(net, mode, eps, None)
}

/// As [`attention_variance`], with each layer's norm vector optionally
/// replaced by its additive-random-vector transform. The multipliers are
/// held fixed when differentiating.
pub fn attention_variance_perturbed(
    net: &Network,
    mode: GroupingMode,
    eps: f64,
    perturbation: Option<&NormPerturbation>,
) -> (f64, Params) {
    let mut grad = net.params().zeros_like();
    let mut psi = 0.0;
    for (idx, g) in layer_groups(net, mode).into_iter().enumerate() {
        let beta = perturbation.and_then(|p| p.get(idx)).and_then(Option::as_ref);
        let values = perturbed(&g.norms, beta);
        let (v, dv) = layer_variance(&values);
        psi += v;
        // The centred derivative sums to zero, so the mean term of the
        // perturbation drops out of the chain rule.
        let d_norm: Vec<f64> = match beta {
            None => dv,
            Some(beta) => dv.iter().zip(beta).map(|(d, b)| d * (1.0 + b)).collect(),
        };
        let coef = to_weight_coef(d_norm.into_iter(), &g.norms, eps);
        let w = net.params().layer(g.layer).unwrap().weight.data();
        g.layout.accumulate(w, &coef, grad.layer_mut(g.layer).unwrap().weight.data_mut());
    }
    (psi, grad)
}

/// Regularisation part of the objective (everything except cross-entropy).
pub fn regularization(
    net: &Network,
    cfg: &ObjectiveConfig,
    perturbation: Option<&NormPerturbation>,
) -> (ObjectiveBreakdown, Params) {
    let eps = cfg.variance_epsilon;
    let lambda_v = cfg.lambda_v();
    let groups = layer_groups(net, cfg.grouping_mode);

    let mut gl = 0.0;
    let mut psi = 0.0;
    let mut dpsi_per_layer = Vec::with_capacity(groups.len());
    for (idx, g) in groups.iter().enumerate() {
        let c = 1.0 / (g.norms.len() as f64).sqrt();
        gl += c * g.norms.iter().sum::<f64>();
        let beta = perturbation.and_then(|p| p.get(idx)).and_then(Option::as_ref);
        let (v, dv) = layer_variance(&perturbed(&g.norms, beta));
        psi += v;
        dpsi_per_layer.push(match beta {
            None => dv,
            Some(beta) => dv.iter().zip(beta).map(|(d, b)| d * (1.0 + b)).collect(),
        });
    }

    let inv = 1.0 / (psi + eps);
    let attention_scale = -lambda_v * inv * inv;

    let mut grad = net.params().zeros_like();
    for ((_, g), (_, p)) in grad.iter_mut().zip(net.params().iter()) {
        for (gw, w) in g.weight.data_mut().iter_mut().zip(p.weight.data()) {
            *gw = 2.0 * cfg.lambda_l2 * w;
        }
        for (gb, b) in g.bias.data_mut().iter_mut().zip(p.bias.data()) {
            *gb = 2.0 * cfg.lambda_l2 * b;
        }
    }
    for (g, dpsi) in groups.iter().zip(&dpsi_per_layer) {
        let c = 1.0 / (g.norms.len() as f64).sqrt();
        let on_norm = dpsi.iter().map(|d| cfg.lambda_s * c + attention_scale * d);
        let coef = to_weight_coef(on_norm, &g.norms, eps);
        let w = net.params().layer(g.layer).unwrap().weight.data();
        g.layout.accumulate(w, &coef, grad.layer_mut(g.layer).unwrap().weight.data_mut());
    }

    let l2_term = cfg.lambda_l2 * net.params().norm_sq();
    let sparsity_term = cfg.lambda_s * gl;
    let attention_term = lambda_v * inv;
    let breakdown = ObjectiveBreakdown {
        data_loss: 0.0,
        l2_term,
        sparsity_term,
        attention_term,
        total: l2_term + sparsity_term + attention_term,
        group_lasso: gl,
        variance: psi,
    };
    (breakdown, grad)
}

/// Full objective on one batch and its gradient.
pub fn composite_objective(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<(ObjectiveBreakdown, Params)> {
    composite_objective_perturbed(net, batch, labels, cfg, None)
}

pub fn composite_objective_perturbed(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    perturbation: Option<&NormPerturbation>,
) -> Result<(ObjectiveBreakdown, Params)> {
    let (_, cache) = net.forward(batch)?;
    let (data_loss, mut grad) = net.backward(&cache, labels)?;
    let (mut breakdown, reg_grad) = regularization(net, cfg, perturbation);
    grad.axpy(1.0, &reg_grad)?;
    breakdown.data_loss = data_loss;
    breakdown.total += data_loss;
    Ok((breakdown, grad))
}
