//! Experiment driver for the two-stage recommender lab. Every subcommand
//! is a deterministic function of (config file, overrides, seed); reruns
//! rewrite byte-identical artifacts.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dnr_core::config::ExperimentConfig;
use dnr_core::error::Error;
use dnr_core::objectives::TrainMode;
use dnr_core::oracle::{verify_theory, Tamper};
use dnr_core::pipeline::{self, SweepAxis};

#[derive(Parser)]
#[command(
    name = "dnr-lab",
    version,
    about = "Two-stage recommender lab: retriever, rerankers, denoising training, diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven subcommand. Dotted-path overrides
/// such as `--dnr.lambda_c=0.3` are peeled off the raw argument list
/// before clap runs, so they can appear anywhere on the command line.
#[derive(Args)]
struct Common {
    /// experiment config JSON; built-in defaults apply when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// directory receiving all artifacts (overrides the config value)
    #[arg(long, value_name = "DIR")]
    output_dir: Option<String>,
}

impl Common {
    fn resolve(&self, overrides: &[String]) -> Result<ExperimentConfig, Error> {
        let mut all = overrides.to_vec();
        if let Some(dir) = &self.output_dir {
            all.push(format!("output_dir={dir}"));
        }
        ExperimentConfig::resolve(self.config.as_deref(), &all)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset: interaction log, retriever, reranking samples
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Retrain the retriever from the persisted log and refresh samples
    TrainRetriever {
        #[command(flatten)]
        common: Common,
    },
    /// Train the direct reranker (no denoising)
    TrainBaseline {
        #[command(flatten)]
        common: Common,
    },
    /// Train the denoising reranker and its noise generator
    TrainDnr {
        #[command(flatten)]
        common: Common,
    },
    /// Score the dataset with a checkpoint, or pass retriever scores through
    Eval {
        #[command(flatten)]
        common: Common,
        /// reranker checkpoint to evaluate
        #[arg(long, value_name = "FILE", conflicts_with = "identity")]
        checkpoint: Option<PathBuf>,
        /// evaluate the retriever ordering itself
        #[arg(long)]
        identity: bool,
        /// also write one metric row per sample
        #[arg(long)]
        dump_per_sample: bool,
    },
    /// Train one denoising run per (value, seed) cell along one axis
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda_c, lambda_m, or lambda_e
        #[arg(long)]
        axis: String,
        /// comma-separated axis values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// comma-separated seeds, one full run per (value, seed)
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// worker threads (default: DNR_LAB_THREADS or all cores)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check the likelihood decompositions on random discrete worlds
    VerifyTheory {
        #[arg(long, default_value_t = 100)]
        worlds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// negative control: corrupt one model so verification must fail
        #[arg(long, hide = true)]
        inject_unnormalized: bool,
    },
    /// Compare generator noise against the recorded true noise
    NoiseDiag {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
}

/// Pull dotted-path config overrides out of the raw argument list. They
/// are recognized by shape (`--a.b=v`): real flags never contain a dot.
fn split_overrides() -> (Vec<OsString>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for (i, arg) in std::env::args_os().enumerate() {
        let s = arg.to_string_lossy();
        let is_override = i > 0
            && s.starts_with("--")
            && matches!(s.split_once('='), Some((key, _)) if key.contains('.'));
        if is_override {
            overrides.push(s.into_owned());
        } else {
            rest.push(arg);
        }
    }
    (rest, overrides)
}

fn resolve_threads(flag: Option<usize>) -> usize {
    let cap = std::env::var("DNR_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    match (flag, cap) {
        (Some(f), Some(c)) => f.min(c),
        (Some(f), None) => f,
        (None, Some(c)) => c,
        (None, None) => 0,
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnknownParam(_) => 2,
        Error::MissingPrereq(_) => 3,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Diverged { .. } | Error::NonFinite { .. } => 4,
        Error::Oracle(_) => 5,
        _ => 1,
    }
}

fn print_report(label: &str, r: &dnr_core::metrics::MetricsReport) {
    println!("{label} (K={}, {} samples, {} without positives)", r.k, r.samples, r.flagged_no_positive);
    println!("  HR@{k}        {:.4}", r.hr, k = r.k);
    println!("  NDCG@{k}      {:.4}", r.ndcg, k = r.k);
    println!("  MAP@{k}       {:.4}", r.map, k = r.k);
    println!("  F1@{k}        {:.4}", r.f1, k = r.k);
    match r.auc {
        Some(a) => println!("  AUC         {:.4}  ({} samples)", a, r.auc_samples),
        None => println!("  AUC         undefined (no two-class sample)"),
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.resolve(overrides)?;
            let stats = pipeline::gen_data(&cfg)?;
            println!("{}", stats.table());
            println!("artifacts written to {}", cfg.output_dir);
        }
        Command::TrainRetriever { common } => {
            let cfg = common.resolve(overrides)?;
            let summary = pipeline::train_retriever(&cfg)?;
            match summary.auc {
                Some(a) => println!("retriever AUC {a:.4} over held-out events"),
                None => println!("retriever trained (no held-out pairs for AUC)"),
            }
            println!("checkpoint and {} samples refreshed in {}", summary.sequences, cfg.output_dir);
        }
        Command::TrainBaseline { common } => {
            let cfg = common.resolve(overrides)?;
            let summary = pipeline::train_reranker(&cfg, TrainMode::Baseline)?;
            if let Some(val) = &summary.final_val {
                print_report("baseline validation", val);
            }
        }
        Command::TrainDnr { common } => {
            let cfg = common.resolve(overrides)?;
            let summary = pipeline::train_reranker(&cfg, TrainMode::Dnr)?;
            if let Some(val) = &summary.final_val {
                print_report("dnr validation", val);
            }
            if summary.phi_init_hash == summary.phi_final_hash {
                println!("note: generator never trained (lambda_e covers all epochs)");
            }
        }
        Command::Eval { common, checkpoint, identity, dump_per_sample } => {
            let cfg = common.resolve(overrides)?;
            if checkpoint.is_none() && !identity {
                return Err(Error::Config(
                    "eval needs either --checkpoint <FILE> or --identity".into(),
                ));
            }
            let report =
                pipeline::evaluate_checkpoint(&cfg, checkpoint.as_deref(), dump_per_sample)?;
            let label = checkpoint
                .as_deref()
                .and_then(|p| p.file_stem())
                .and_then(|s| s.to_str())
                .unwrap_or("identity")
                .to_string();
            print_report(&label, &report);
        }
        Command::Sweep { common, axis, values, seeds, threads } => {
            let cfg = common.resolve(overrides)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = pipeline::sweep(&cfg, axis, &values, &seeds, resolve_threads(threads))?;
            for value in &values {
                let cell: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.value == *value)
                    .map(|r| r.val_ndcg)
                    .collect();
                let mean = cell.iter().sum::<f64>() / cell.len() as f64;
                println!("{}={value}: mean NDCG {mean:.4} over {} seeds", axis.name(), cell.len());
            }
            println!("rows written to {}/{}", cfg.output_dir, pipeline::SWEEP_FILE);
        }
        Command::VerifyTheory { worlds, seed, inject_unnormalized } => {
            let tamper = if inject_unnormalized { Tamper::UnnormalizedQ } else { Tamper::None };
            let report = verify_theory(worlds, seed, 1e-9, tamper)?;
            println!("checked {} worlds ({} cases)", report.worlds, report.cases);
            println!("  max residual, full decomposition      {:.3e}", report.max_residual_eq3);
            println!("  max residual, synthetic decomposition {:.3e}", report.max_residual_eq5);
            println!("  max slack delta_x                     {:.3e}", report.max_delta_x);
            println!("  max |delta_x| at Bayes generator      {:.3e}", report.max_bayes_delta_x_abs);
            if !report.pass {
                return Err(Error::Oracle(format!(
                    "decomposition check failed (tolerance {:.1e})",
                    report.tolerance
                )));
            }
            println!("PASS (tolerance {:.1e})", report.tolerance);
        }
        Command::NoiseDiag { common, bins } => {
            let cfg = common.resolve(overrides)?;
            let bundle = pipeline::noise_diag(&cfg, bins)?;
            println!("noise distribution vs recorded truth ({} draws, {bins} bins)", bundle.pool_size);
            println!("  trained generator   KL {:.4}  MMD^2 {:.3e}", bundle.model.kl, bundle.model.mmd2);
            println!("  gaussian heuristic  KL {:.4}  MMD^2 {:.3e}", bundle.gaussian.kl, bundle.gaussian.mmd2);
            println!("  beta heuristic      KL {:.4}  MMD^2 {:.3e}", bundle.beta.kl, bundle.beta.mmd2);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, overrides) = split_overrides();
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
