use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scoreblend::metrics::{ksd2, mmd2};
use scoreblend::targets::preset;
use scoreblend::{bank_with_proxy, write_bank, BankProvenance, KernelSpec, KsdStatistic, ProxyConfig, ReferenceBank};
use scoreblend_cli::{output_dir, run, ExperimentConfig, ExperimentKind, HarnessError, HarnessResult, Scale};
use serde_json::json;

#[derive(Parser)]
#[command(name = "scoreblend", version, about = "Score-blending diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prior sampling: MMD, KSD and score RMSE versus bank size.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        /// Run the score-RMSE-only variant.
        #[arg(long)]
        rmse_only: bool,
    },
    /// Posterior regime sweep over dimension and noise level.
    Sweep(RunArgs),
    /// Error-correlation curves between the two base estimators.
    Correlate(RunArgs),
    /// Analytic and empirical error-variance profiles.
    VarianceProfile(RunArgs),
    /// Posterior sampling against the conjugate posterior and MALA.
    Posterior(RunArgs),
    /// MMD or KSD between sample matrices stored as CSV.
    Metrics(MetricsArgs),
    /// Draw a reference bank from a preset and write it in binary form.
    Bank(BankArgs),
    /// Print a built-in experiment configuration as JSON.
    Preset {
        /// One of prior_sampling, posterior_sampling, correlation_curve,
        /// variance_profile, regime_sweep, rmse_vs_nref.
        experiment: String,
        #[arg(long)]
        paper_scale: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration; the built-in preset is used otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Bank sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n_ref: Option<Vec<usize>>,
    /// Output root; a per-run subdirectory is created inside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the full-size preset instead of the quick one.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Samples to evaluate, one row per point.
    #[arg(long)]
    samples: PathBuf,
    /// Reference samples for MMD.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Preset whose exact score is used for KSD.
    #[arg(long)]
    target: Option<String>,
    /// Kernel as JSON; median-heuristic RBF for MMD and IMQ for KSD otherwise.
    #[arg(long)]
    kernel: Option<String>,
}

#[derive(Args)]
struct BankArgs {
    #[arg(long)]
    target: String,
    #[arg(long)]
    n_ref: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store kNN-proxy scores instead of exact ones.
    #[arg(long)]
    proxy: bool,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(kind: ExperimentKind, args: &RunArgs) -> HarnessResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => {
            let scale = if args.paper_scale { Scale::Paper } else { Scale::Desk };
            ExperimentConfig::preset(kind, scale)
        }
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(n) = &args.n_ref {
        cfg.n_ref = n.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_experiment(kind: ExperimentKind, args: &RunArgs) -> HarnessResult<bool> {
    let cfg = load_config(kind, args)?;
    let allowed = match kind {
        ExperimentKind::PriorSampling | ExperimentKind::RmseVsNref => {
            matches!(
                cfg.experiment,
                ExperimentKind::PriorSampling | ExperimentKind::RmseVsNref
            )
        }
        other => cfg.experiment == other,
    };
    if !allowed {
        return Err(HarnessError::Config(format!(
            "config describes a `{}` experiment",
            cfg.experiment.name()
        )));
    }
    let result = run(&cfg)?;
    let dir = output_dir(&cfg, args.out.clone());
    let files = result.write_to(&dir)?;
    let manifest = json!({
        "experiment": result.experiment,
        "config_hash": result.config_hash,
        "output_dir": dir,
        "files": files,
        "cells": result.cells.len(),
        "all_complete": result.all_complete(),
        "wall_clock_seconds": result.wall_clock_seconds,
        "nfe": result.nfe,
        "mala_gradient_evals": result.mala_gradient_evals,
    });
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(result.all_complete())
}

/// Numeric CSV matrix; a leading non-numeric row is treated as a header.
fn read_matrix(path: &Path) -> HarnessResult<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(HarnessError::Config(format!("{}: row {}: {e}", path.display(), i + 1))),
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(HarnessError::Config(format!(
            "{}: expected a non-empty rectangular matrix",
            path.display()
        )));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| HarnessError::Config(e.to_string()))
}

fn metrics(args: &MetricsArgs) -> HarnessResult<bool> {
    let x = read_matrix(&args.samples)?;
    let kernel: Option<KernelSpec> = args.kernel.as_deref().map(serde_json::from_str).transpose()?;
    let mut out = serde_json::Map::new();
    if let Some(reference) = &args.reference {
        let y = read_matrix(reference)?;
        let spec = kernel.clone().unwrap_or_else(KernelSpec::median_heuristic);
        out.insert("mmd2".into(), json!(mmd2(x.view(), y.view(), &spec)?));
    }
    if let Some(name) = &args.target {
        let target = preset(name)?;
        let spec = kernel.unwrap_or_else(|| KernelSpec::imq(1.0, -0.5));
        out.insert(
            "ksd2".into(),
            json!(ksd2(x.view(), |p| target.score(p), &spec, KsdStatistic::V)?),
        );
    }
    if out.is_empty() {
        return Err(HarnessError::Config(
            "pass --reference for MMD and/or --target for KSD".into(),
        ));
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(true)
}

fn bank(args: &BankArgs) -> HarnessResult<bool> {
    let target = preset(&args.target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let bank = if args.proxy {
        let points = target.sample(args.n_ref, &mut rng);
        let mut cfg = ProxyConfig::default_for(target.dim());
        cfg.k = cfg.k.min(args.n_ref.saturating_sub(1)).max(1);
        bank_with_proxy(points.view(), &cfg)?.0
    } else {
        ReferenceBank::from_target(&target, args.n_ref, &mut rng)?
    };
    let provenance = BankProvenance {
        seed: args.seed,
        target: args.target.clone(),
        n_ref: bank.n_ref(),
        dim: bank.dim(),
        note: args.proxy.then(|| "proxy scores".to_owned()),
    };
    write_bank(&args.out, &bank, Some(&provenance))?;
    println!(
        "{}",
        json!({ "bank": args.out, "n_ref": bank.n_ref(), "dim": bank.dim() })
    );
    Ok(true)
}

fn print_preset(experiment: &str, paper_scale: bool) -> HarnessResult<bool> {
    let kind: ExperimentKind = serde_json::from_value(json!(experiment))?;
    let scale = if paper_scale { Scale::Paper } else { Scale::Desk };
    println!(
        "{}",
        serde_json::to_string_pretty(&ExperimentConfig::preset(kind, scale))?
    );
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Sample { run, rmse_only } => {
            let kind = if *rmse_only {
                ExperimentKind::RmseVsNref
            } else {
                ExperimentKind::PriorSampling
            };
            run_experiment(kind, run)
        }
        Command::Sweep(a) => run_experiment(ExperimentKind::RegimeSweep, a),
        Command::Correlate(a) => run_experiment(ExperimentKind::CorrelationCurve, a),
        Command::VarianceProfile(a) => run_experiment(ExperimentKind::VarianceProfile, a),
        Command::Posterior(a) => run_experiment(ExperimentKind::PosteriorSampling, a),
        Command::Metrics(a) => metrics(a),
        Command::Bank(a) => bank(a),
        Command::Preset {
            experiment,
            paper_scale,
        } => print_preset(experiment, *paper_scale),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some cells could not be evaluated; see metrics.csv");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
