//! Threshold pruning of parameter groups and the resulting sparsity and
//! FLOP accounting.
//!
//! Effective sparsity counts a weight as removed when it is zero or when
//! either unit it connects is dead. A unit is dead when no nonzero path
//! reaches it from the input or none leads from it to the output, so
//! zeroing a neuron's outgoing weights also removes its incoming ones.
//! Constant units (all inputs dead) are treated as dead; their bias can be
//! folded downstream. FLOPs count multiply-adds of weighted layers only:
//! two per weight for a dense layer and `2·H_out·W_out` per kernel weight
//! for a convolution. The pruned count keeps only nonzero weights between
//! live units, which reduces to `2·in_alive·out_alive` per dense layer when
//! pruning is structured.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::grouping::text_enum;
use crate::nn::{LayerSpec, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Prune when `‖w_j‖ < tau · max_k ‖w_k‖` within the layer.
    #[default]
    RelativeToMax,
    /// Prune when `‖w_j‖ < tau`.
    Absolute,
}

text_enum!(ThresholdMode { RelativeToMax => "relative_to_max", Absolute => "absolute" });

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub tau: f64,
    pub mode: ThresholdMode,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            tau: 0.01,
            mode: ThresholdMode::RelativeToMax,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::param("prune.tau", format!("must be finite and non-negative, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSparsity {
    pub layer_index: usize,
    pub kind: String,
    pub groups_total: usize,
    /// Groups whose norm is exactly zero.
    pub groups_zero: usize,
    pub weights_total: usize,
    pub zero_weights: usize,
    /// Zero weights plus nonzero weights attached to a dead unit.
    pub effective_zero_weights: usize,
    pub units_in: usize,
    pub units_in_alive: usize,
    pub units_out: usize,
    pub units_out_alive: usize,
    pub flops_dense: u64,
    pub flops_pruned: u64,
}

impl LayerSparsity {
    pub fn sparsity_pct(&self) -> f64 {
        100.0 * self.effective_zero_weights as f64 / self.weights_total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub flops_dense: u64,
    pub flops_pruned: u64,
    pub eval_error_pct: Option<f64>,
    pub warnings: Vec<String>,
}

const REPORT_VERSION: u32 = 1;

impl SparsityReport {
    /// `flops_dense / flops_pruned`; infinite when nothing is left to compute.
    pub fn flop_ratio(&self) -> f64 {
        if self.flops_pruned == 0 {
            f64::INFINITY
        } else {
            self.flops_dense as f64 / self.flops_pruned as f64
        }
    }

    pub fn per_layer_pct(&self) -> Vec<f64> {
        self.layers.iter().map(LayerSparsity::sparsity_pct).collect()
    }

    /// Effective zero fraction over all weights of all weighted layers.
    pub fn total_sparsity_pct(&self) -> f64 {
        let zero: usize = self.layers.iter().map(|l| l.effective_zero_weights).sum();
        let total: usize = self.layers.iter().map(|l| l.weights_total).sum();
        100.0 * zero as f64 / total as f64
    }

    /// One-row summary: `error | s1-s2-... / ratio`.
    pub fn table(&self) -> String {
        let err = self.eval_error_pct.map_or("n/a".to_string(), |e| format!("{e:.2}"));
        let per: Vec<String> = self.per_layer_pct().iter().map(|p| format!("{p:.0}")).collect();
        format!(
            "Error(%) | Sparsity(%) / flop_ratio\n{err} | {} / {:.2}x\n",
            per.join("-"),
            self.flop_ratio()
        )
    }

    /// Stable `key = value` serialisation; see [`SparsityReport::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report.version = {REPORT_VERSION}");
        if let Some(e) = self.eval_error_pct {
            let _ = writeln!(s, "eval_error_pct = {e}");
        }
        let _ = writeln!(s, "flops_dense = {}", self.flops_dense);
        let _ = writeln!(s, "flops_pruned = {}", self.flops_pruned);
        let _ = writeln!(s, "flop_ratio = {}", self.flop_ratio());
        let _ = writeln!(s, "total_sparsity_pct = {}", self.total_sparsity_pct());
        let _ = writeln!(s, "layers = {}", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{i}");
            let _ = writeln!(s, "{p}.index = {}", l.layer_index);
            let _ = writeln!(s, "{p}.kind = {}", l.kind);
            let _ = writeln!(s, "{p}.groups_total = {}", l.groups_total);
            let _ = writeln!(s, "{p}.groups_zero = {}", l.groups_zero);
            let _ = writeln!(s, "{p}.weights_total = {}", l.weights_total);
            let _ = writeln!(s, "{p}.zero_weights = {}", l.zero_weights);
            let _ = writeln!(s, "{p}.effective_zero_weights = {}", l.effective_zero_weights);
            let _ = writeln!(s, "{p}.sparsity_pct = {}", l.sparsity_pct());
            let _ = writeln!(s, "{p}.units_in = {}", l.units_in);
            let _ = writeln!(s, "{p}.units_in_alive = {}", l.units_in_alive);
            let _ = writeln!(s, "{p}.units_out = {}", l.units_out);
            let _ = writeln!(s, "{p}.units_out_alive = {}", l.units_out_alive);
            let _ = writeln!(s, "{p}.flops_dense = {}", l.flops_dense);
            let _ = writeln!(s, "{p}.flops_pruned = {}", l.flops_pruned);
        }
        for (i, w) in self.warnings.iter().enumerate() {
            let _ = writeln!(s, "warning.{i} = {w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = kv.get(key).ok_or_else(|| Error::Config(format!("report is missing {key}")))?;
            raw.parse().map_err(|_| Error::Config(format!("report key {key}: cannot parse {raw:?}")))
        }
        let version: u32 = get(&kv, "report.version")?;
        if version != REPORT_VERSION {
            return Err(Error::Config(format!("unsupported report version {version}")));
        }
        let count: usize = get(&kv, "layers")?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let p = |f: &str| format!("layer.{i}.{f}");
            layers.push(LayerSparsity {
                layer_index: get(&kv, &p("index"))?,
                kind: get(&kv, &p("kind"))?,
                groups_total: get(&kv, &p("groups_total"))?,
                groups_zero: get(&kv, &p("groups_zero"))?,
                weights_total: get(&kv, &p("weights_total"))?,
                zero_weights: get(&kv, &p("zero_weights"))?,
                effective_zero_weights: get(&kv, &p("effective_zero_weights"))?,
                units_in: get(&kv, &p("units_in"))?,
                units_in_alive: get(&kv, &p("units_in_alive"))?,
                units_out: get(&kv, &p("units_out"))?,
                units_out_alive: get(&kv, &p("units_out_alive"))?,
                flops_dense: get(&kv, &p("flops_dense"))?,
                flops_pruned: get(&kv, &p("flops_pruned"))?,
            });
        }
        let mut warnings = Vec::new();
        while let Some(w) = kv.get(&format!("warning.{}", warnings.len())) {
            warnings.push(w.clone());
        }
        Ok(SparsityReport {
            layers,
            flops_dense: get(&kv, "flops_dense")?,
            flops_pruned: get(&kv, "flops_pruned")?,
            eval_error_pct: kv.contains_key("eval_error_pct").then(|| get(&kv, "eval_error_pct")).transpose()?,
            warnings,
        })
    }
}

/// Zeroes every group below the threshold in a copy of `net` and reports
/// on the result.
pub fn prune_groups(net: &Network, cfg: &PruneConfig) -> Result<(Network, SparsityReport)> {
    cfg.validate()?;
    let mut pruned = net.clone();
    let mut warnings = Vec::new();
    for layer in net.groupable_layers() {
        let layout = net.group_layout(layer, net.grouping()).expect("groupable layer");
        let w = pruned.params_mut().layer_mut(layer).unwrap().weight.data_mut();
        let norms = layout.norms(w);
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let threshold = match cfg.mode {
            ThresholdMode::RelativeToMax => cfg.tau * max,
            ThresholdMode::Absolute => cfg.tau,
        };
        if max == 0.0 {
            warnings.push(format!("layer {layer}: all group norms are zero"));
        }
        let mut removed = 0;
        for (j, &n) in norms.iter().enumerate() {
            if n < threshold {
                for i in layout.member_indices(j) {
                    w[i] = 0.0;
                }
                removed += 1;
            }
        }
        if removed == norms.len() && max > 0.0 {
            warnings.push(format!("layer {layer}: every group fell below the threshold"));
        }
    }
    let mut report = analyze(&pruned)?;
    report.warnings.splice(0..0, warnings);
    Ok((pruned, report))
}

/// Literal zero fraction (percent) of each weighted layer's weights.
pub fn sparsity_percentages(net: &Network) -> Vec<f64> {
    net.params()
        .iter()
        .map(|(_, p)| {
            let w = p.weight.data();
            100.0 * w.iter().filter(|&&v| v == 0.0).count() as f64 / w.len() as f64
        })
        .collect()
}

/// Dense FLOPs of `reference`'s architecture over effective FLOPs of
/// `pruned`. Both must share an architecture.
pub fn estimate_speedup(reference: &Network, pruned: &Network) -> Result<f64> {
    if reference.layers() != pruned.layers() || reference.input_shape() != pruned.input_shape() {
        return Err(Error::Config("speedup needs two networks with the same architecture".into()));
    }
    let r = analyze(pruned)?;
    Ok(r.flop_ratio())
}

/// `layer,group,norm` rows for every weighted layer.
pub fn group_norms_csv(net: &Network) -> Result<String> {
    let mut s = String::from("layer,group,norm\n");
    for layer in net.groupable_layers() {
        for (j, n) in net.group_norms(layer)?.norms.data().iter().enumerate() {
            let _ = writeln!(s, "{layer},{j},{n}");
        }
    }
    Ok(s)
}

/// `edges[a * out + b]`: whether input unit `a` feeds output unit `b`
/// through any nonzero weight.
fn edges(spec: &LayerSpec, w: &[f64]) -> (usize, usize, Vec<bool>) {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => (inputs, outputs, w.iter().map(|&v| v != 0.0).collect()),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let kk = kernel * kernel;
            let mut e = vec![false; in_channels * out_channels];
            for o in 0..out_channels {
                for c in 0..in_channels {
                    let base = (o * in_channels + c) * kk;
                    e[c * out_channels + o] = w[base..base + kk].iter().any(|&v| v != 0.0);
                }
            }
            (in_channels, out_channels, e)
        }
        _ => unreachable!(),
    }
}

fn units(shape: &[usize]) -> usize {
    shape[0]
}

/// Liveness of units at every layer boundary.
fn liveness(net: &Network) -> Vec<Vec<bool>> {
    let shapes = net.boundary_shapes();
    let layers = net.layers();
    let mut edge_cache: Vec<Option<(usize, usize, Vec<bool>)>> = layers
        .iter()
        .enumerate()
        .map(|(i, spec)| net.params().layer(i).map(|p| edges(spec, p.weight.data())))
        .collect();

    let mut fwd = vec![vec![true; units(&shapes[0])]];
    for (i, spec) in layers.iter().enumerate() {
        let prev = &fwd[i];
        let next = match (spec, &edge_cache[i]) {
            (_, Some((nin, nout, e))) => (0..*nout).map(|b| (0..*nin).any(|a| prev[a] && e[a * nout + b])).collect(),
            (LayerSpec::Flatten, None) if shapes[i].len() == 3 => {
                let hw = shapes[i][1] * shapes[i][2];
                (0..units(&shapes[i + 1])).map(|f| prev[f / hw]).collect()
            }
            _ => prev.clone(),
        };
        fwd.push(next);
    }

    let mut bwd = vec![Vec::new(); layers.len() + 1];
    bwd[layers.len()] = vec![true; units(&shapes[layers.len()])];
    for (i, spec) in layers.iter().enumerate().rev() {
        let next = &bwd[i + 1];
        bwd[i] = match (spec, &edge_cache[i]) {
            (_, Some((nin, nout, e))) => (0..*nin).map(|a| (0..*nout).any(|b| next[b] && e[a * nout + b])).collect(),
            (LayerSpec::Flatten, None) if shapes[i].len() == 3 => {
                let hw = shapes[i][1] * shapes[i][2];
                (0..shapes[i][0]).map(|c| next[c * hw..(c + 1) * hw].iter().any(|&x| x)).collect()
            }
            _ => next.clone(),
        };
    }
    edge_cache.clear();
    fwd.into_iter().zip(bwd).map(|(f, b)| f.into_iter().zip(b).map(|(x, y)| x && y).collect()).collect()
}

/// Sparsity and FLOP accounting for `net` as it stands.
pub fn analyze(net: &Network) -> Result<SparsityReport> {
    let shapes = net.boundary_shapes();
    let alive = liveness(net);
    let mut layers = Vec::new();
    for layer in net.groupable_layers() {
        let spec = &net.layers()[layer];
        let w = net.params().layer(layer).unwrap().weight.data();
        let (nin, nout, _) = edges(spec, w);
        let (a_in, a_out) = (&alive[layer], &alive[layer + 1]);
        let per_pair = w.len() / (nin * nout);
        let mut live_nonzero = 0usize;
        for (i, &v) in w.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let (a, b) = match spec {
                LayerSpec::Dense { outputs, .. } => (i / outputs, i % outputs),
                _ => {
                    let pair = i / per_pair;
                    (pair % nin, pair / nin)
                }
            };
            if a_in[a] && a_out[b] {
                live_nonzero += 1;
            }
        }
        // each weight is one multiply-add per output position
        let positions = match spec {
            LayerSpec::Conv2d { .. } => (shapes[layer + 1][1] * shapes[layer + 1][2]) as u64,
            _ => 1,
        };
        let in_alive = a_in.iter().filter(|&&x| x).count();
        let out_alive = a_out.iter().filter(|&&x| x).count();
        let norms = net.group_norms(layer)?.norms;
        layers.push(LayerSparsity {
            layer_index: layer,
            kind: spec.name().to_string(),
            groups_total: norms.len(),
            groups_zero: norms.data().iter().filter(|&&n| n == 0.0).count(),
            weights_total: w.len(),
            zero_weights: w.iter().filter(|&&v| v == 0.0).count(),
            effective_zero_weights: w.len() - live_nonzero,
            units_in: nin,
            units_in_alive: in_alive,
            units_out: nout,
            units_out_alive: out_alive,
            flops_dense: 2 * w.len() as u64 * positions,
            flops_pruned: 2 * live_nonzero as u64 * positions,
        });
    }
    let flops_dense = layers.iter().map(|l| l.flops_dense).sum();
    let flops_pruned = layers.iter().map(|l| l.flops_pruned).sum();
    let mut warnings = Vec::new();
    if flops_pruned == 0 {
        warnings.push("no live path from input to output".to_string());
    }
    Ok(SparsityReport {
        layers,
        flops_dense,
        flops_pruned,
        eval_error_pct: None,
        warnings,
    })
}
