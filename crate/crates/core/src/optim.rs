//! Mini-batch SGD with adaptive gradient clipping, a plateau learning-rate
//! schedule and early stopping on a held-out split.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gasl::{apply_gasl, attention_perturbation, GaslApplication, GaslConfig, GaslOutcome};
use crate::nn::{Network, Params};
use crate::regularizers::{composite_objective_perturbed, ObjectiveBreakdown, ObjectiveConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Clipping constant: components are clamped to `±zeta / lr`.
    pub zeta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Record GASL outcomes every this many batches (0 disables).
    pub gasl_log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            zeta: 0.1,
            batch_size: 64,
            max_epochs: 10,
            plateau_patience: 5,
            early_stop_patience: 20,
            lr_drop_factor: 10.0,
            seed: 0,
            gasl_log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::param("train.lr0", format!("must be positive, got {}", self.lr0)));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::param("train.zeta", format!("must be positive, got {}", self.zeta)));
        }
        if !(self.lr_drop_factor > 1.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::param("train.lr_drop_factor", "must exceed 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("train.batch_size", "must be at least 1"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::param("train.patience", "patience values must be at least 1"));
        }
        Ok(())
    }
}

/// Per-epoch summary. Objective components are averages over the epoch's
/// mini-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: ObjectiveBreakdown,
    pub eval_error_pct: f64,
    pub lr: f64,
    /// Fraction of GASL draws whose variance gate passed.
    pub gasl_applied_fraction: f64,
}

impl fmt::Display for EpochRecord {
    /// One `key=value` line; floats use the shortest exact representation.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.objective;
        write!(
            f,
            "epoch={} lr={} data_loss={} l2_term={} sparsity_term={} attention_term={} total={} \
             group_lasso={} variance={} eval_error_pct={} gasl_applied_fraction={}",
            self.epoch,
            self.lr,
            o.data_loss,
            o.l2_term,
            o.sparsity_term,
            o.attention_term,
            o.total,
            o.group_lasso,
            o.variance,
            self.eval_error_pct,
            self.gasl_applied_fraction
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaslLogEntry {
    pub epoch: usize,
    pub batch: usize,
    pub outcome: GaslOutcome,
}

impl fmt::Display for GaslLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} batch={} {}", self.epoch, self.batch, self.outcome)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub gasl_log: Vec<GaslLogEntry>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Epoch log, one line per record.
    pub fn log_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Clamps every component of `grad` to `[−zeta/lr, zeta/lr]`, so a step of
/// size `lr` moves no parameter by more than `zeta`.
pub fn adaptive_clip(grad: &Tensor, zeta: f64, lr: f64) -> Result<Tensor> {
    let bound = clip_bound(zeta, lr)?;
    Ok(grad.map(|g| g.clamp(-bound, bound)))
}

fn clip_bound(zeta: f64, lr: f64) -> Result<f64> {
    if !(lr > 0.0) {
        return Err(Error::param("learning_rate", format!("must be positive, got {lr}")));
    }
    if !(zeta > 0.0) {
        return Err(Error::param("zeta", format!("must be positive, got {zeta}")));
    }
    Ok(zeta / lr)
}

/// `θ ← θ − lr·clip(g)` over every parameter tensor.
pub fn sgd_step(params: &mut Params, grad: &Params, zeta: f64, lr: f64) -> Result<()> {
    let bound = clip_bound(zeta, lr)?;
    for (p, g) in params.tensors_mut().zip(grad.tensors()) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d.clamp(-bound, bound);
        }
    }
    Ok(())
}

const EVAL_CHUNK: usize = 1000;

/// Classification error in percent.
pub fn evaluate_error(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut wrong = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let (batch, labels) = data.gather(&idx);
        let pred = net.predict(&batch)?;
        wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
        start = end;
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

/// Learning-rate and stopping state driven by the held-out error.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    lr0: f64,
    drop: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
    drops: i32,
    best: f64,
    since_best: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr0: cfg.lr0,
            drop: cfg.lr_drop_factor,
            plateau_patience: cfg.plateau_patience,
            early_stop_patience: cfg.early_stop_patience,
            drops: 0,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr0 / self.drop.powi(self.drops)
    }

    /// Feeds one epoch's held-out error; returns true when training should stop.
    pub fn observe(&mut self, error: f64) -> bool {
        if error < self.best {
            self.best = error;
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best.is_multiple_of(self.plateau_patience) {
            self.drops += 1;
        }
        self.since_best >= self.early_stop_patience
    }
}

fn accumulate(sum: &mut ObjectiveBreakdown, b: &ObjectiveBreakdown) {
    sum.data_loss += b.data_loss;
    sum.l2_term += b.l2_term;
    sum.sparsity_term += b.sparsity_term;
    sum.attention_term += b.attention_term;
    sum.total += b.total;
    sum.group_lasso += b.group_lasso;
    sum.variance += b.variance;
}

fn averaged(sum: &ObjectiveBreakdown, n: usize) -> ObjectiveBreakdown {
    let k = 1.0 / n.max(1) as f64;
    ObjectiveBreakdown {
        data_loss: sum.data_loss * k,
        l2_term: sum.l2_term * k,
        sparsity_term: sum.sparsity_term * k,
        attention_term: sum.attention_term * k,
        total: sum.total * k,
        group_lasso: sum.group_lasso * k,
        variance: sum.variance * k,
    }
}

/// Trains `net` in place. `on_epoch` sees each record as it is produced.
///
/// The shuffle order and GASL draws come from two streams forked off
/// `cfg.seed`, so a run is fully determined by its inputs. Training aborts
/// with [`Error::NonFinite`] naming the first objective term that stopped
/// being finite.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    eval_set: &Dataset,
    objective: &ObjectiveConfig,
    gasl: &GaslConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    objective.validate()?;
    gasl.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }

    let mut master = RngStream::new(cfg.seed);
    let mut shuffle_rng = master.fork();
    let mut gasl_rng = master.fork();
    let mut schedule = PlateauSchedule::new(cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut outcome = TrainOutcome::default();

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        shuffle_rng.shuffle(&mut order);
        let mut sum = ObjectiveBreakdown::default();
        let (mut gates, mut passed) = (0usize, 0usize);
        let mut batches = 0;

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut draws = Vec::new();
            let mut perturbation = None;
            if gasl.enabled {
                match gasl.application {
                    GaslApplication::Persistent => draws = apply_gasl(net, gasl, &mut gasl_rng)?,
                    GaslApplication::Attention => {
                        let (p, o) = attention_perturbation(net, gasl, objective.grouping_mode, &mut gasl_rng)?;
                        perturbation = Some(p);
                        draws = o;
                    }
                }
            }
            gates += draws.len();
            passed += draws.iter().filter(|o| o.applied).count();
            if cfg.gasl_log_every > 0 && b % cfg.gasl_log_every == 0 {
                outcome.gasl_log.extend(draws.into_iter().map(|o| GaslLogEntry { epoch, batch: b, outcome: o }));
            }

            let (batch, labels) = train_set.gather(chunk);
            let (breakdown, grad) =
                composite_objective_perturbed(net, &batch, &labels, objective, perturbation.as_ref())?;
            if let Some(term) = breakdown.first_non_finite() {
                return Err(Error::NonFinite { term: term.to_string() });
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite { term: "gradient".into() });
            }
            sgd_step(net.params_mut(), &grad, cfg.zeta, lr)?;
            accumulate(&mut sum, &breakdown);
            batches += 1;
        }

        let eval_error_pct = evaluate_error(net, eval_set)?;
        let record = EpochRecord {
            epoch,
            objective: averaged(&sum, batches),
            eval_error_pct,
            lr,
            gasl_applied_fraction: if gates == 0 { 0.0 } else { passed as f64 / gates as f64 },
        };
        on_epoch(&record);
        outcome.records.push(record);
        if schedule.observe(eval_error_pct) {
            outcome.stopped_early = true;
            break;
        }
    }
    Ok(outcome)
}
