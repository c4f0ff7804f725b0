//! Additive random vectors for variance supervision.
//!
//! For a value vector `V` (a layer's group norms or its raw weights), draw
//! `β_k ~ LogNormal(μ, σ)` per entry, form `Vʳ = β ⊙ V` and, if the empirical
//! variance of `Vʳ` exceeds that of `V`, replace `V` with
//! `V̂ = V + (Vʳ − mean(Vʳ))`. The mixing matrix is the identity, and the
//! empirical mean is used so `mean(V̂) = mean(V)` holds per draw.
//!
//! Two ways of applying the transform during training are supported:
//! [`GaslApplication::Persistent`] overwrites the parameters every
//! mini-batch; [`GaslApplication::Attention`] leaves the parameters alone
//! and evaluates the attention term (and its gradient) on `V̂` instead of
//! `V` for that mini-batch.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::grouping::text_enum;
use crate::nn::{GroupingMode, Network};
use crate::regularizers::NormPerturbation;
use crate::rng::{sample_lognormal, RngStream};
use crate::stats::{empirical_cov_matrix, empirical_cross_cov, mean_of, variance_of};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GaslTarget {
    #[default]
    GroupNorms,
    RawWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MixingMatrix {
    #[default]
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GaslApplication {
    /// Transformed values are written back into the weights.
    Persistent,
    /// Transformed group norms are substituted into the attention term only.
    #[default]
    Attention,
}

text_enum!(GaslTarget { GroupNorms => "group_norms", RawWeights => "raw_weights" });
text_enum!(MixingMatrix { Identity => "identity" });
text_enum!(GaslApplication { Persistent => "persistent", Attention => "attention" });

#[derive(Clone, Debug, PartialEq)]
pub struct GaslConfig {
    pub enabled: bool,
    pub mu: f64,
    pub sigma: f64,
    pub target: GaslTarget,
    pub mixing_matrix: MixingMatrix,
    pub application: GaslApplication,
    /// Groups with a norm below this are left out of persistent rescaling.
    pub zero_norm_epsilon: f64,
}

impl Default for GaslConfig {
    fn default() -> Self {
        GaslConfig {
            enabled: true,
            mu: 0.1,
            sigma: 1.0,
            target: GaslTarget::GroupNorms,
            mixing_matrix: MixingMatrix::Identity,
            application: GaslApplication::Attention,
            zero_norm_epsilon: 1e-8,
        }
    }
}

impl GaslConfig {
    pub fn disabled() -> Self {
        GaslConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::param("gasl.sigma", format!("must be positive, got {}", self.sigma)));
        }
        if !self.mu.is_finite() {
            return Err(Error::param("gasl.mu", format!("must be finite, got {}", self.mu)));
        }
        if !(self.zero_norm_epsilon >= 0.0) {
            return Err(Error::param("gasl.zero_norm_epsilon", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaslOutcome {
    pub layer_index: usize,
    /// Whether the variance gate passed.
    pub applied: bool,
    pub var_before: f64,
    pub var_after: f64,
    pub mean_drift: f64,
    /// Zero-norm groups excluded from persistent rescaling.
    pub skipped_groups: usize,
}

impl fmt::Display for GaslOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer={} applied={} var_before={:e} var_after={:e} mean_drift={:e} skipped={}",
            self.layer_index, self.applied, self.var_before, self.var_after, self.mean_drift, self.skipped_groups
        )
    }
}

/// Draws the multipliers for `v` and evaluates the variance gate.
fn draw_and_gate(v: &[f64], rng: &mut RngStream, cfg: &GaslConfig) -> Result<(Vec<f64>, bool)> {
    let beta = sample_lognormal(rng, cfg.mu, cfg.sigma, v.len())?.into_data();
    let vr: Vec<f64> = v.iter().zip(&beta).map(|(a, b)| a * b).collect();
    let applied = variance_of(&vr) > variance_of(v);
    Ok((beta, applied))
}

fn transform_with(v: &[f64], beta: &[f64]) -> Vec<f64> {
    let vr: Vec<f64> = v.iter().zip(beta).map(|(a, b)| a * b).collect();
    let m = mean_of(&vr);
    v.iter().zip(&vr).map(|(a, r)| a + (r - m)).collect()
}

/// One additive-random-vector step on `v`.
pub fn gasl_transform(v: &Tensor, rng: &mut RngStream, cfg: &GaslConfig) -> Result<(Tensor, GaslOutcome)> {
    gasl_transform_slice(v.data(), rng, cfg).map(|(out, outcome)| {
        let n = out.len();
        (Tensor::from_parts(vec![n], out), outcome)
    })
}

fn gasl_transform_slice(v: &[f64], rng: &mut RngStream, cfg: &GaslConfig) -> Result<(Vec<f64>, GaslOutcome)> {
    if v.len() < 2 {
        return Err(Error::InsufficientData {
            op: "gasl_transform",
            needed: 2,
            got: v.len(),
        });
    }
    let (beta, applied) = draw_and_gate(v, rng, cfg)?;
    let out = if applied { transform_with(v, &beta) } else { v.to_vec() };
    let outcome = GaslOutcome {
        layer_index: 0,
        applied,
        var_before: variance_of(v),
        var_after: variance_of(&out),
        mean_drift: mean_of(&out) - mean_of(v),
        skipped_groups: 0,
    };
    Ok((out, outcome))
}

/// Applies the transform to every weighted layer of `net`, in layer order.
///
/// With [`GaslTarget::GroupNorms`] the live group norms of a layer are
/// transformed and each group is rescaled by `v̂_j / v_j`; a negative `v̂_j`
/// therefore flips the sign of that group. With [`GaslTarget::RawWeights`]
/// the flattened weights are transformed directly.
pub fn apply_gasl(net: &mut Network, cfg: &GaslConfig, rng: &mut RngStream) -> Result<Vec<GaslOutcome>> {
    if !cfg.enabled {
        return Ok(Vec::new());
    }
    cfg.validate()?;
    let mode = net.grouping();
    let mut outcomes = Vec::new();
    for layer in net.groupable_layers() {
        let layout = net.group_layout(layer, mode).expect("groupable layer");
        let weight = &mut net.params_mut().layer_mut(layer).unwrap().weight;
        let outcome = match cfg.target {
            GaslTarget::RawWeights => {
                let (out, mut o) = gasl_transform_slice(weight.data(), rng, cfg)?;
                weight.data_mut().copy_from_slice(&out);
                o.layer_index = layer;
                o
            }
            GaslTarget::GroupNorms => {
                let norms = layout.norms(weight.data());
                let live: Vec<usize> = (0..norms.len()).filter(|&j| norms[j] >= cfg.zero_norm_epsilon).collect();
                let skipped = norms.len() - live.len();
                if live.len() < 2 {
                    GaslOutcome {
                        layer_index: layer,
                        applied: false,
                        var_before: 0.0,
                        var_after: 0.0,
                        mean_drift: 0.0,
                        skipped_groups: skipped,
                    }
                } else {
                    let v: Vec<f64> = live.iter().map(|&j| norms[j]).collect();
                    let (v_hat, mut o) = gasl_transform_slice(&v, rng, cfg)?;
                    let mut factors = vec![1.0; norms.len()];
                    for (&j, (&new, &old)) in live.iter().zip(v_hat.iter().zip(&v)) {
                        factors[j] = new / old;
                    }
                    layout.scale_groups(weight.data_mut(), &factors);
                    o.layer_index = layer;
                    o.skipped_groups = skipped;
                    o
                }
            }
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Draws the per-layer multipliers used by [`GaslApplication::Attention`]:
/// for each weighted layer, the norm vector under `mode` is gated exactly as
/// in [`gasl_transform`], and the multipliers are kept where the gate passes.
pub fn attention_perturbation(
    net: &Network,
    cfg: &GaslConfig,
    mode: GroupingMode,
    rng: &mut RngStream,
) -> Result<(NormPerturbation, Vec<GaslOutcome>)> {
    let mut perturbation = Vec::new();
    let mut outcomes = Vec::new();
    for layer in net.groupable_layers() {
        let layout = net.group_layout(layer, mode).expect("groupable layer");
        let v = layout.norms(net.params().layer(layer).unwrap().weight.data());
        if v.len() < 2 {
            perturbation.push(None);
            continue;
        }
        let (beta, applied) = draw_and_gate(&v, rng, cfg)?;
        let v_hat = if applied { transform_with(&v, &beta) } else { v.clone() };
        outcomes.push(GaslOutcome {
            layer_index: layer,
            applied,
            var_before: variance_of(&v),
            var_after: variance_of(&v_hat),
            mean_drift: mean_of(&v_hat) - mean_of(&v),
            skipped_groups: 0,
        });
        perturbation.push(applied.then_some(beta));
    }
    Ok((perturbation, outcomes))
}

/// Largest entrywise gap between the two sides of
/// `Var[V̂] = Var[V] + M·Var[Vʳ]·Mᵀ + ζ + ζᵀ`, `ζ = M·Cov[Vʳ, V]`,
/// where `V̂ = V + M(Vʳ − E Vʳ)` and every moment is the empirical estimate
/// over the `k` rows.
pub fn verify_variance_decomposition(v_samples: &Tensor, vr_samples: &Tensor, m: &Tensor) -> Result<f64> {
    if v_samples.shape() != vr_samples.shape() {
        return Err(Error::shape("verify_variance_decomposition", v_samples.shape(), vr_samples.shape()));
    }
    let (k, n) = v_samples.dims2("verify_variance_decomposition")?;
    if m.shape() != [n, n] {
        return Err(Error::shape("verify_variance_decomposition", m.shape(), &[n, n]));
    }
    if k < 2 {
        return Err(Error::InsufficientData {
            op: "verify_variance_decomposition",
            needed: 2,
            got: k,
        });
    }

    let mut vr_mean = vec![0.0; n];
    for row in vr_samples.data().chunks_exact(n) {
        for (acc, v) in vr_mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    vr_mean.iter_mut().for_each(|v| *v /= k as f64);
    let centred = Tensor::from_parts(
        vec![k, n],
        vr_samples
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&vr_mean).map(|(v, m)| v - m).collect::<Vec<_>>())
            .collect(),
    );
    // rows are samples, so M·x for every row is X·Mᵀ
    let v_hat = v_samples.add(&centred.matmul(&m.transpose()?)?)?;
    let lhs = empirical_cov_matrix(&v_hat)?;

    let zeta = m.matmul(&empirical_cross_cov(vr_samples, v_samples)?)?;
    let rhs = empirical_cov_matrix(v_samples)?
        .add(&m.matmul(&empirical_cov_matrix(vr_samples)?)?.matmul(&m.transpose()?)?)?
        .add(&zeta)?
        .add(&zeta.transpose()?)?;
    Ok(lhs.sub(&rhs)?.max_abs())
}
