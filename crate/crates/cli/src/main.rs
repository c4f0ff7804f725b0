//! `gasl`: train, prune and inspect sparse networks on MNIST.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gasl_core::config::ExperimentConfig;
use gasl_core::data::Split;
use gasl_core::experiment::{check_arch, load_splits, prune_and_evaluate, resolve_data_dir, train_network, Splits};
use gasl_core::nn::checkpoint::{self, write_atomic};
use gasl_core::optim::evaluate_error;
use gasl_core::prune::{group_norms_csv, SparsityReport};
use gasl_core::verify::{decomposition_check, gradient_check};
use gasl_core::Error;

const SWEEP_ALPHAS: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
const GRADIENT_TOL: f64 = 1e-5;
const DECOMPOSITION_TOL: f64 = 1e-10;

#[derive(Parser, Debug)]
#[command(name = "gasl", version, about = "Structured sparsity learning with guided attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["mlp", "lenet"])]
    arch: Option<String>,
    #[arg(long = "lambda-s", global = true)]
    lambda_s: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    gasl: Option<Switch>,
    #[arg(long, global = true)]
    attention: Option<Attention>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "data-dir", global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Any config key, e.g. `--set train.max_epochs=20`. Applied after the
    /// named flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Attention {
    Structured,
    Unstructured,
    None,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write its checkpoint and epoch log.
    Train,
    /// Classification error of a checkpoint.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["val", "test"])]
        split: String,
    },
    /// Prune a checkpoint and write the pruned model and sparsity report.
    Prune {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print a saved sparsity report as a table.
    Report {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Gradient and variance-decomposition self-checks.
    Verify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Train and prune once per alpha in {0.01, 0.1, 1, 10, 100}.
    Sweep,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Format { .. } | Error::Length { .. } | Error::Data(_) => 2,
        _ => 1,
    }
}

fn build_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(a) = &common.arch {
        set("arch", a.clone())?;
    }
    if let Some(v) = common.lambda_s {
        set("objective.lambda_s", v.to_string())?;
    }
    if let Some(v) = common.alpha {
        set("objective.alpha", v.to_string())?;
    }
    if let Some(s) = common.gasl {
        set("gasl.enabled", matches!(s, Switch::On).then_some("on").unwrap_or("off").into())?;
    }
    match common.attention {
        Some(Attention::Structured) => {
            set("objective.grouping", "structured".into())?;
            set("objective.attention", "on".into())?;
        }
        Some(Attention::Unstructured) => {
            set("objective.grouping", "unstructured".into())?;
            set("objective.attention", "on".into())?;
        }
        Some(Attention::None) => set("objective.attention", "off".into())?,
        None => {}
    }
    if let Some(v) = common.seed {
        set("train.seed", v.to_string())?;
    }
    if let Some(d) = &common.data_dir {
        set("data.dir", d.display().to_string())?;
    }
    if let Some(o) = &common.out {
        set("out_dir", o.display().to_string())?;
    }
    if let Some(t) = common.tau {
        set("prune.tau", t.to_string())?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        set(k.trim(), v.trim().to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn splits(cfg: &ExperimentConfig) -> Result<Splits, Error> {
    load_splits(cfg, &resolve_data_dir(cfg))
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<(), Error> {
    let data = splits(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    let (net, outcome) = train_network(cfg, &data, |r| eprintln!("{r}"))?;
    checkpoint::save(&net, &cfg.out_dir.join("model.bin"))?;
    write_text(&cfg.out_dir.join("epochs.log"), &outcome.log_text())?;
    let gasl: String = outcome.gasl_log.iter().map(|e| format!("{e}\n")).collect();
    write_text(&cfg.out_dir.join("gasl.log"), &gasl)?;
    let last = outcome.records.last().map_or(f64::NAN, |r| r.eval_error_pct);
    println!("epochs = {}", outcome.records.len());
    println!("val_error_pct = {last}");
    println!("model = {}", cfg.out_dir.join("model.bin").display());
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, model: &Option<PathBuf>) -> Result<gasl_core::nn::Network, Error> {
    let path = model.clone().unwrap_or_else(|| cfg.out_dir.join("model.bin"));
    let mut net = checkpoint::load(&path)?;
    check_arch(&net, cfg)?;
    net.set_grouping(cfg.grouping());
    Ok(net)
}

fn eval_cmd(cfg: &ExperimentConfig, model: &Option<PathBuf>, split: &str) -> Result<(), Error> {
    let net = load_model(cfg, model)?;
    let data = splits(cfg)?;
    let set = if split == "val" { &data.val } else { &data.test };
    println!("split = {}", if split == "val" { Split::Val } else { Split::Test });
    println!("error_pct = {}", evaluate_error(&net, set)?);
    Ok(())
}

fn prune_cmd(cfg: &ExperimentConfig, model: &Option<PathBuf>) -> Result<(), Error> {
    let net = load_model(cfg, model)?;
    let data = splits(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let (pruned, report) = prune_and_evaluate(&net, cfg, &data.test)?;
    checkpoint::save(&pruned, &cfg.out_dir.join("pruned.bin"))?;
    write_text(&cfg.out_dir.join("report.txt"), &report.to_text())?;
    write_text(&cfg.out_dir.join("group_norms.csv"), &group_norms_csv(&net)?)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.table());
    Ok(())
}

fn report_cmd(cfg: &ExperimentConfig, report: &Option<PathBuf>) -> Result<(), Error> {
    let path = report.clone().unwrap_or_else(|| cfg.out_dir.join("report.txt"));
    let text = fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
    let r = SparsityReport::from_text(&text)?;
    print!("{}", r.table());
    println!("total_sparsity_pct = {:.2}", r.total_sparsity_pct());
    Ok(())
}

/// Returns whether every check passed.
fn verify_cmd(cfg: &ExperimentConfig, instances: usize) -> Result<bool, Error> {
    let mut ok = true;
    for (m, residual) in decomposition_check(cfg.train.seed, 50, 64, 16)? {
        let pass = residual < DECOMPOSITION_TOL;
        ok &= pass;
        println!("decomposition m={m} max_residual={residual:e} {}", if pass { "ok" } else { "FAIL" });
    }
    for c in gradient_check(cfg.train.seed, instances)? {
        let pass = c.max_rel_error < GRADIENT_TOL && c.checked > 0;
        ok &= pass;
        println!(
            "gradient term={} instances={} checked={} skipped={} max_rel_error={:e} {}",
            c.term,
            c.instances,
            c.checked,
            c.skipped,
            c.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn sweep_cmd(cfg: &ExperimentConfig) -> Result<(), Error> {
    let data = splits(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let mut base_cfg = cfg.clone();
    base_cfg.objective.lambda_s = 0.0;
    base_cfg.gasl.enabled = false;
    let (base, _) = train_network(&base_cfg, &data, |r| eprintln!("baseline {r}"))?;
    let base_err = evaluate_error(&base, &data.test)?;
    let mut out = String::new();
    let _ = writeln!(out, "baseline_error_pct = {base_err}");
    println!("alpha | error(%) | increase | sparsity(%) | flop_ratio");
    for alpha in SWEEP_ALPHAS {
        let mut run = cfg.clone();
        run.objective.alpha = alpha;
        let (net, _) = train_network(&run, &data, |r| eprintln!("alpha={alpha} {r}"))?;
        let (_, report) = prune_and_evaluate(&net, &run, &data.test)?;
        let err = report.eval_error_pct.unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "alpha.{alpha}.error_pct = {err}\nalpha.{alpha}.error_increase_pct = {}\nalpha.{alpha}.total_sparsity_pct = {}\nalpha.{alpha}.flop_ratio = {}",
            err - base_err,
            report.total_sparsity_pct(),
            report.flop_ratio()
        );
        println!(
            "{alpha} | {err:.2} | {:+.2} | {:.1} | {:.2}x",
            err - base_err,
            report.total_sparsity_pct(),
            report.flop_ratio()
        );
    }
    write_text(&cfg.out_dir.join("sweep.txt"), &out)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = build_config(&cli.common)?;
    match &cli.command {
        Command::Train => train_cmd(&cfg)?,
        Command::Eval { model, split } => eval_cmd(&cfg, model, split)?,
        Command::Prune { model } => prune_cmd(&cfg, model)?,
        Command::Report { report } => report_cmd(&cfg, report)?,
        Command::Verify { instances } => {
            if !verify_cmd(&cfg, *instances)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Sweep => sweep_cmd(&cfg)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
