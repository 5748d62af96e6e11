//! Command-line entry point: prepare, train, evaluate, sweep, gradcheck.
//!
//! Every command is deterministic given (inputs, config, seed). Exit codes:
//! 0 on success, 2 for usage/config/input errors, 3 when a sweep completed
//! with per-run failures, 1 for other runtime failures.

mod config;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use twinrec_core::corpus::{DatasetBundle, SourceMeta};
use twinrec_core::encoder::Checkpoint;
use twinrec_core::evaluator::{self, EvalOptions};
use twinrec_core::trainer::{self, TrainConfig};
use twinrec_core::util::write_atomic;

#[derive(Parser)]
#[command(
    name = "twinrec",
    about = "Sequential next-item recommendation with Barlow Twins regularization",
    version
)]
struct Cli {
    /// Size of the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a raw interaction log into a dataset bundle.
    Prepare(PrepareArgs),
    /// Train a model on a prepared bundle.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the bundle's test pool.
    Evaluate(EvaluateArgs),
    /// Train + evaluate over a grid of alpha or lambda values.
    Sweep(sweep::SweepArgs),
    /// Compare analytic gradients against finite differences on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Delimited text file with columns user, item, timestamp.
    #[arg(long)]
    input: PathBuf,
    /// Output path for the dataset bundle (JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Preparation config JSON (delimiter, min_count, quantile, max_len).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset bundle.
    #[arg(long)]
    dataset: PathBuf,
    /// Training config JSON; keys mirror the TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training-log CSV path (default: <checkpoint>.trainlog.csv).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output report JSON; CSV sidecars land next to it.
    #[arg(long)]
    report: PathBuf,
    /// Comma-separated K values for hr@K / ndcg@K (default 1,5,10,50).
    #[arg(long)]
    k: Option<String>,
    /// Seed recorded in the report (default: the checkpoint's seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Toy config JSON (dim must stay <= 8); a built-in toy is used if absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional path for the text report.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => sweep::cmd_sweep(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Usage-class failures (missing inputs, malformed configs) exit with 2.
fn classify(err: &anyhow::Error) -> u8 {
    use twinrec_core::Error as E;
    if let Some(core) = err.downcast_ref::<E>() {
        return match core {
            E::Config(_) | E::Parse { .. } | E::EmptyCorpus(_) | E::InvalidInput(_) => 2,
            E::Io(_) => 2,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    1
}

fn cmd_prepare(args: PrepareArgs) -> Result<ExitCode> {
    let prep = config::load_prepare_config(args.config.as_deref())?;
    if !args.input.exists() {
        anyhow::bail!(twinrec_core::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input file {} does not exist", args.input.display()),
        )));
    }
    let source = SourceMeta {
        path: args.input.display().to_string(),
        delimiter: prep.delimiter_char()?,
        min_count: prep.min_count,
        quantile: prep.quantile,
        max_len: prep.max_len,
    };
    let bundle = DatasetBundle::prepare(&args.input, source)?;
    bundle.save(&args.dataset)?;
    println!("{}", bundle.summary());
    println!("bundle written to {}", args.dataset.display());
    Ok(ExitCode::SUCCESS)
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = config::load_train_config(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = load_train_config(args.config.as_deref(), args.seed)?;
    let bundle = DatasetBundle::load(&args.dataset)
        .with_context(|| format!("loading bundle {}", args.dataset.display()))?;
    let outcome = trainer::train(&cfg, &bundle)?;

    outcome.checkpoint.save(&args.checkpoint)?;
    let log_path = args
        .report
        .unwrap_or_else(|| with_suffix(&args.checkpoint, ".trainlog.csv"));
    let csv = outcome
        .log
        .to_csv(&cfg.to_json(), config::fixed_timing());
    write_atomic(&log_path, csv.as_bytes())?;
    println!(
        "best epoch {} (validation ndcg@10 = {:.6}); checkpoint {}, log {}",
        outcome.best_epoch,
        outcome.best_val_ndcg10,
        args.checkpoint.display(),
        log_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let bundle = DatasetBundle::load(&args.dataset)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut options = EvalOptions::default();
    if let Some(ks) = &args.k {
        options.ks_rank = parse_k_list(ks)?;
    }
    let seed = args.seed.unwrap_or(ckpt.seed);
    let output = evaluator::evaluate(&ckpt.params, &bundle, &options, seed)?;

    write_atomic(&args.report, output.report.to_json()?.as_bytes())?;
    let spectrum_path = with_suffix(&args.report, ".spectrum.csv");
    write_atomic(
        &spectrum_path,
        evaluator::spectrum_csv(&output.report.spectrum).as_bytes(),
    )?;
    let hist_path = with_suffix(&args.report, ".histogram.csv");
    write_atomic(
        &hist_path,
        evaluator::histogram_csv(&output.histogram).as_bytes(),
    )?;
    println!(
        "evaluated {} test users ({} skipped): report {}, sidecars {}, {}",
        output.report.num_test_users,
        output.report.skipped_users,
        args.report.display(),
        spectrum_path.display(),
        hist_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let cfg = match &args.config {
        Some(path) => config::load_train_config(Some(path))?,
        None => TrainConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            max_len: 8,
            dropout: 0.0,
            sce_k: 8,
            bce_m: 2,
            batch_size: 4,
            ..TrainConfig::default()
        },
    };
    let reports = trainer::gradcheck(&cfg)?;
    let mut text = String::new();
    const TOLERANCE: f64 = 1e-4;
    for report in &reports {
        text.push_str(&format!(
            "loss={} alpha={} lambda={} max_rel_err={:.3e} {}\n",
            report.loss_kind,
            report.alpha,
            report.lambda,
            report.max_rel_err,
            if report.passed(TOLERANCE) { "PASS" } else { "FAIL" }
        ));
        for entry in &report.entries {
            text.push_str(&format!(
                "  {:<24} max_rel_err={:.3e} max_abs_err={:.3e}\n",
                entry.tensor, entry.max_rel_err, entry.max_abs_err
            ));
        }
    }
    print!("{text}");
    if let Some(path) = &args.report {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_k_list(raw: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = raw
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| twinrec_core::Error::Config(format!("bad K list {raw:?}")))?;
    if ks.is_empty() || ks.contains(&0) {
        anyhow::bail!(twinrec_core::Error::Config(
            "K list must be nonempty positive integers".into()
        ));
    }
    Ok(ks)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}{suffix}"))
}
