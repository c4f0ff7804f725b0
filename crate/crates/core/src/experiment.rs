//! End-to-end runs: load MNIST, build and train a network, prune, report.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::data::{load_mnist, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::{evaluate_error, train, EpochRecord, TrainOutcome};
use crate::prune::{prune_groups, SparsityReport};
use crate::rng::RngStream;

const INIT_SALT: u64 = 0x1d5e_ed00_c0ff_ee11;

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// The directory to read MNIST from: the config value, then `MNIST_DIR`,
/// then `data/mnist` under the current directory.
pub fn resolve_data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data_dir
        .clone()
        .or_else(|| std::env::var_os("MNIST_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Loads train/val/test, shaped for `cfg.arch` and cut to the configured limits.
pub fn load_splits(cfg: &ExperimentConfig, dir: &Path) -> Result<Splits> {
    let shape = cfg.arch.input_shape();
    let full = load_mnist(dir, Split::Train)?.with_sample_shape(&shape)?;
    let (mut train, val) = full.split_tail(cfg.val_size)?;
    if cfg.train_limit > 0 && cfg.train_limit < train.len() {
        train = train.slice(0, cfg.train_limit, Split::Train)?;
    }
    let mut test = load_mnist(dir, Split::Test)?.with_sample_shape(&shape)?;
    if cfg.test_limit > 0 && cfg.test_limit < test.len() {
        test = test.slice(0, cfg.test_limit, Split::Test)?;
    }
    Ok(Splits { train, val, test })
}

/// Fresh He-initialised network for `cfg`, seeded from `train.seed`.
pub fn build_network(cfg: &ExperimentConfig) -> Network {
    let mut net = cfg.arch.build();
    let dense = cfg.dense_grouping.unwrap_or(net.dense_grouping());
    net = net.with_grouping(cfg.grouping(), dense);
    net.init_he(&mut RngStream::new(cfg.train.seed ^ INIT_SALT));
    net
}

pub fn train_network(
    cfg: &ExperimentConfig,
    splits: &Splits,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network, TrainOutcome)> {
    cfg.validate()?;
    let mut net = build_network(cfg);
    let outcome = train(&mut net, &splits.train, &splits.val, &cfg.objective, &cfg.gasl, &cfg.train, on_epoch)?;
    Ok((net, outcome))
}

/// Prunes with `cfg.prune` and fills in the test error of the pruned network.
pub fn prune_and_evaluate(net: &Network, cfg: &ExperimentConfig, test: &Dataset) -> Result<(Network, SparsityReport)> {
    let (pruned, mut report) = prune_groups(net, &cfg.prune)?;
    report.eval_error_pct = Some(evaluate_error(&pruned, test)?);
    Ok((pruned, report))
}

/// Checks that a network loaded from disk matches the configured architecture.
pub fn check_arch(net: &Network, cfg: &ExperimentConfig) -> Result<()> {
    let want = cfg.arch.build();
    if net.layers() != want.layers() {
        return Err(Error::Config(format!("checkpoint does not match arch `{}`", cfg.arch)));
    }
    Ok(())
}
