//! Hyperparameter sweep: train + evaluate per (value, seed), aggregate mean
//! and standard deviation per metric per value, one CSV row per value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;

use twinrec_core::corpus::DatasetBundle;
use twinrec_core::evaluator::{self, EvalOptions};
use twinrec_core::trainer::{self, TrainConfig};
use twinrec_core::util::{fmt_f64, write_atomic};

use crate::config;

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Base training config; the swept parameter is overwritten per value.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which hyperparameter to sweep: alpha or lambda.
    #[arg(long)]
    param: String,
    /// Comma-separated parameter values, e.g. 0.0,0.1,0.3.
    #[arg(long)]
    values: String,
    /// Seeds per value; run r uses base seed + r.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Aggregated CSV output; per-run artifacts land in <report stem>.runs/.
    #[arg(long)]
    report: PathBuf,
    /// Overrides the base config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    Alpha,
    Lambda,
}

impl SweepParam {
    fn parse(raw: &str) -> Result<SweepParam> {
        match raw {
            "alpha" => Ok(SweepParam::Alpha),
            "lambda" => Ok(SweepParam::Lambda),
            other => anyhow::bail!(twinrec_core::Error::Config(format!(
                "unknown sweep parameter {other:?}; expected alpha or lambda"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Lambda => "lambda",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Lambda => cfg.lambda = value,
        }
    }
}

/// Fixed column order for the aggregated metrics.
const METRICS: &[&str] = &[
    "hr@1", "hr@5", "hr@10", "hr@50", "ndcg@1", "ndcg@5", "ndcg@10", "ndcg@50", "cov@1", "cov@5",
    "cov@10", "overlap", "eff_rank", "val_ndcg10",
];

fn collect_metrics(
    report: &evaluator::EvalReport,
    best_val: f64,
) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    for &k in &[1usize, 5, 10, 50] {
        if let Some(&v) = report.hr.get(&k) {
            out.insert(match k {
                1 => "hr@1",
                5 => "hr@5",
                10 => "hr@10",
                _ => "hr@50",
            }, v);
        }
        if let Some(&v) = report.ndcg.get(&k) {
            out.insert(match k {
                1 => "ndcg@1",
                5 => "ndcg@5",
                10 => "ndcg@10",
                _ => "ndcg@50",
            }, v);
        }
    }
    for &k in &[1usize, 5, 10] {
        if let Some(&v) = report.cov.get(&k) {
            out.insert(match k {
                1 => "cov@1",
                5 => "cov@5",
                _ => "cov@10",
            }, v);
        }
    }
    out.insert("overlap", report.overlap_factor);
    out.insert("eff_rank", report.spectrum.effective_rank);
    out.insert("val_ndcg10", best_val);
    out
}

fn run_once(
    cfg: &TrainConfig,
    bundle: &DatasetBundle,
    run_dir: &Path,
) -> Result<BTreeMap<&'static str, f64>> {
    std::fs::create_dir_all(run_dir)?;
    let outcome = trainer::train(cfg, bundle)?;
    let log_csv = outcome.log.to_csv(&cfg.to_json(), config::fixed_timing());
    write_atomic(&run_dir.join("trainlog.csv"), log_csv.as_bytes())?;
    let output = evaluator::evaluate(
        &outcome.checkpoint.params,
        bundle,
        &EvalOptions::default(),
        cfg.seed,
    )?;
    write_atomic(
        &run_dir.join("report.json"),
        output.report.to_json()?.as_bytes(),
    )?;
    Ok(collect_metrics(&output.report, outcome.best_val_ndcg10))
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let base = {
        let mut cfg = config::load_train_config(args.config.as_deref())?;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        cfg
    };
    let param = SweepParam::parse(&args.param)?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| twinrec_core::Error::Config(format!("bad values list {:?}", args.values)))?;
    if values.is_empty() || values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        anyhow::bail!(twinrec_core::Error::Config(
            "sweep values must be nonempty and nonnegative".into()
        ));
    }
    if args.repeats == 0 {
        anyhow::bail!(twinrec_core::Error::Config("repeats must be >= 1".into()));
    }

    let bundle = DatasetBundle::load(&args.dataset)
        .with_context(|| format!("loading bundle {}", args.dataset.display()))?;

    let stem = args
        .report
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sweep".into());
    let runs_root = args.report.with_file_name(format!("{stem}.runs"));

    let mut csv = format!("# config: {}\n", base.to_json());
    csv.push_str(&format!(
        "# param: {}; values: {:?}; repeats: {}; base_seed: {}\n",
        param.name(),
        values,
        args.repeats,
        base.seed
    ));
    csv.push_str("param,value,repeats,ok,failed");
    for m in METRICS {
        csv.push_str(&format!(",{m}_mean,{m}_std"));
    }
    csv.push('\n');

    let mut any_failure = false;
    for &value in &values {
        let mut per_metric: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        let mut ok = 0usize;
        let mut failed = 0usize;
        for rep in 0..args.repeats {
            let mut cfg = base.clone();
            param.apply(&mut cfg, value);
            cfg.seed = base.seed + rep as u64;
            let run_dir = runs_root
                .join(format!("{}_{}", param.name(), value))
                .join(format!("seed_{}", cfg.seed));
            match run_once(&cfg, &bundle, &run_dir) {
                Ok(metrics) => {
                    ok += 1;
                    for (name, v) in metrics {
                        per_metric.entry(name).or_default().push(v);
                    }
                }
                Err(err) => {
                    failed += 1;
                    any_failure = true;
                    eprintln!(
                        "sweep run {}={} seed {} failed: {err:#}",
                        param.name(),
                        value,
                        cfg.seed
                    );
                }
            }
        }
        csv.push_str(&format!(
            "{},{},{},{ok},{failed}",
            param.name(),
            fmt_f64(value),
            args.repeats
        ));
        for m in METRICS {
            match per_metric.get(m) {
                Some(samples) if !samples.is_empty() => {
                    let (mean, std) = mean_std(samples);
                    csv.push_str(&format!(",{},{}", fmt_f64(mean), fmt_f64(std)));
                }
                _ => csv.push_str(",,"),
            }
        }
        csv.push('\n');
        println!(
            "{} = {}: {ok} ok, {failed} failed",
            param.name(),
            value
        );
    }

    write_atomic(&args.report, csv.as_bytes())?;
    println!("sweep table written to {}", args.report.display());
    if any_failure {
        // Documented: partial failures yield exit code 3.
        Ok(ExitCode::from(3))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}
