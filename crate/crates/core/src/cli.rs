//! `laaf train | verify | dynamics`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or usage
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use crate::config::RunConfig;
use crate::dynamics::{dynamics_report, run_circles};
use crate::error::{Error, Result};
use crate::network::{Activation, Checkpoint, SlopeKind};
use crate::objective::{Objective, ObjectiveSpec, RecoveryKind};
use crate::optimize::{train, TrainOptions};
use crate::problems::dataset_csv;
use crate::report::{
    dynamics_csv, dynamics_report_json, inverse_estimates, timing_csv, trace_csv, write_file, write_json, RunSummary,
};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "laaf",
    version,
    about = "Adaptive-activation networks: training, identity checks, conditioning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a preset once per seed and write traces, checkpoints and summaries.
    Train(Common),
    /// Check gradients and the slope identities on random small networks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Build the conditioned step from a wrong locality matrix (self-test;
        /// the equivalence check must fail).
        #[arg(long)]
        corrupt_a: bool,
    },
    /// Condition numbers along SGD on the circles data, all four modes.
    Dynamics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        activation: Option<Activation>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// One or more seeds, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "N[,N...]")]
    pub seed: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SlopeKind>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Include dense matrices in dynamics reports.
    #[arg(long)]
    pub full: bool,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<crate::problems::PresetName>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<SlopeKind, String> {
    SlopeKind::parse(s).ok_or_else(|| format!("unknown mode `{s}` (fixed, gaaf, llaaf, nlaaf)"))
}

fn parse_preset(s: &str) -> std::result::Result<crate::problems::PresetName, String> {
    crate::problems::PresetName::parse(s)
        .ok_or_else(|| format!("unknown preset `{s}` (discontinuous, poisson_inverse, burgers_inverse, circles)"))
}

impl clap::ValueEnum for Activation {
    fn value_variants<'a>() -> &'a [Self] {
        &[
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Relu,
            Activation::Softplus,
        ]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }))
    }
}

impl Common {
    /// Config file (or defaults) with command-line values on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.seed {
            cfg.seeds = s.clone();
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        if let Some(n) = self.iterations {
            cfg.overrides.iterations = Some(n);
        }
        cfg.full |= self.full;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => c.resolve().and_then(|cfg| cmd_train(&cfg)),
        Command::Verify { common, corrupt_a } => common
            .resolve()
            .and_then(|cfg| cmd_verify(&cfg, common.mode.is_some(), *corrupt_a)),
        Command::Dynamics {
            common,
            width,
            activation,
            epochs,
        } => common.resolve().and_then(|mut cfg| {
            if let Some(w) = width {
                cfg.circles.width = *w;
            }
            if let Some(a) = activation {
                cfg.circles.activation = *a;
            }
            if let Some(e) = epochs {
                cfg.circles.epochs = *e;
            }
            cfg.validate()?;
            cmd_dynamics(&cfg)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

fn run_dir(cfg: &RunConfig, name: &str, mode: SlopeKind, seed: u64) -> PathBuf {
    cfg.out.join(name).join(mode.to_string()).join(format!("seed{seed}"))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    for &seed in &cfg.seeds {
        let preset = cfg.problem(seed)?;
        let params = preset.network(cfg.mode, seed)?;
        let objective = Objective::new(preset.objective_spec(cfg.mode), &params)?;
        let options = TrainOptions {
            iterations: preset.iterations,
            freeze_slopes: false,
            stop: cfg.stop,
        };
        let every = (preset.iterations / 20).max(1);
        let trace = train(
            &objective,
            objective.initial_theta(&params),
            cfg.optimizer_for(&preset),
            &options,
            &mut |row| {
                if row.iteration % every == 0 {
                    info!(
                        "{} seed {seed} iteration {}: loss {:.6e}",
                        preset.name, row.iteration, row.total
                    );
                }
            },
        )?;
        let dir = run_dir(cfg, &preset.name, cfg.mode, seed);
        let trained = objective.network(&trace.final_theta)?;
        write_file(&dir.join("trace.csv"), &trace_csv(&trace))?;
        write_file(&dir.join("timing.csv"), &timing_csv(&trace))?;
        write_file(&dir.join("data.csv"), &dataset_csv(&preset.data))?;
        Checkpoint::from_params(&trained, seed).save(&dir.join("checkpoint.json"))?;
        let last = trace.last();
        let summary = RunSummary {
            preset: preset.name.clone(),
            mode: cfg.mode.to_string(),
            seed,
            iterations: last.iteration,
            stopped_early: trace.stopped_early,
            final_total: last.total,
            final_mse_u: last.mse_u,
            final_mse_f: last.mse_f,
            final_recovery: last.recovery,
            inverse: inverse_estimates(&trace, &preset.truth),
            relative_l2: preset.relative_l2(&trained)?,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        let inverse: Vec<String> = summary
            .inverse
            .iter()
            .map(|e| format!(" {}={:.6}", e.name, e.estimate))
            .collect();
        println!(
            "{} {} seed {seed}: loss {:.6e}{}  -> {}",
            preset.name,
            cfg.mode,
            last.total,
            inverse.concat(),
            dir.display()
        );
    }
    Ok(EXIT_OK)
}

/// With `only_mode` unset every mode is checked.
pub fn cmd_verify(cfg: &RunConfig, only_mode: bool, corrupt_a: bool) -> Result<i32> {
    let kinds: Vec<SlopeKind> = if only_mode {
        vec![cfg.mode]
    } else {
        SlopeKind::ALL.to_vec()
    };
    if kinds == [SlopeKind::Fixed] {
        println!("mode fixed has no slopes: skipping step-equivalence, Euler and constant-network checks");
    }
    if corrupt_a {
        println!("using a corrupted locality matrix; step_equivalence is expected to fail");
    }
    let seed = cfg.seeds[0];
    let results = verify::run_all(&kinds, &cfg.verify, corrupt_a, seed)?;
    println!(
        "{:<18} {:<6} {:>5} {:>12} {:>9}  status",
        "check", "mode", "cases", "worst", "threshold"
    );
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({})", r.check, r.mode))
        .collect();
    if failed.is_empty() {
        println!("all checks passed");
        Ok(EXIT_OK)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

pub fn cmd_dynamics(cfg: &RunConfig) -> Result<i32> {
    let preset = cfg.circles.preset();
    let name = format!("circles_{}_w{}", preset.activation, preset.width);
    let base = cfg.out.join("dynamics").join(&name);
    let mut finals: Vec<(SlopeKind, Vec<(f64, f64)>)> = SlopeKind::ALL.iter().map(|&k| (k, Vec::new())).collect();
    for &seed in &cfg.seeds {
        let runs = run_circles(&preset, seed)?;
        let dir = base.join(format!("seed{seed}"));
        let baseline = runs[0].records[0].condition;
        let mut methods = Vec::new();
        for (run, slot) in runs.iter().zip(finals.iter_mut()) {
            write_file(&dir.join(format!("{}.csv", run.mode)), &dynamics_csv(run))?;
            let last = run.records.last().expect("epoch 0 is always recorded");
            slot.1.push((last.loss, last.normalized_condition));
            let mut entry = json!({
                "mode": run.mode.to_string(),
                "final_loss": last.loss,
                "final_normalized_condition": last.normalized_condition,
            });
            if run.mode.is_adaptive() {
                let spec = ObjectiveSpec {
                    w_f: 0.0,
                    w_u: 1.0,
                    w_a: 0.0,
                    data: Some(crate::problems::circles_dataset(
                        preset.n_samples,
                        preset.noise,
                        preset.factor,
                        preset.data_seed,
                    )?),
                    residual: None,
                    recovery: RecoveryKind::None,
                };
                let report = dynamics_report(&run.final_params, &spec, preset.lr, baseline)?;
                entry["final_report"] = dynamics_report_json(&report, cfg.full);
            }
            methods.push(entry);
        }
        write_json(&dir.join("summary.json"), &json!({ "seed": seed, "methods": methods }))?;
        println!("{name} seed {seed} -> {}", dir.display());
    }
    let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let combined: Vec<_> = finals
        .iter()
        .map(|(k, v)| {
            json!({
                "mode": k.to_string(),
                "mean_final_loss": mean(v, |p| p.0),
                "mean_final_normalized_condition": mean(v, |p| p.1),
            })
        })
        .collect();
    write_json(
        &base.join("summary.json"),
        &json!({
            "protocol": protocol(&preset),
            "seeds": cfg.seeds,
            "methods": combined,
        }),
    )?;
    for (k, v) in &finals {
        println!(
            "  {:<6} mean final loss {:.6e}  mean final normalized condition {:.6e}",
            k.to_string(),
            mean(v, |p| p.0),
            mean(v, |p| p.1)
        );
    }
    Ok(EXIT_OK)
}

fn protocol(p: &crate::problems::CirclesPreset) -> serde_json::Value {
    json!({
        "widths": p.widths(),
        "activation": p.activation.to_string(),
        "n_samples": p.n_samples,
        "noise": p.noise,
        "factor": p.factor,
        "optimizer": "sgd",
        "lr": p.lr,
        "epochs": p.epochs,
        "batch_size": p.batch_size,
        "hessian_every": p.hessian_every,
        "data_seed": p.data_seed,
        "loss": "mean cross-entropy over the full data set, no slope recovery",
        "condition_matrix": "G0 = diag((Aa)^2) + diag(W) A A^T diag(W), identity on the output layer",
        "normalization": "running minimum divided by the standard network's epoch-0 condition number",
    })
}

/// Directory `train` writes a run to.
pub fn train_dir(cfg: &RunConfig, seed: u64) -> Result<PathBuf> {
    Ok(run_dir(cfg, &cfg.problem(seed)?.name, cfg.mode, seed))
}
