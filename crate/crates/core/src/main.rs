//! Command-line driver for the two-stage lesion-detection pipeline.
//!
//! Exit codes: 0 success, 1 gradient-check failure, 2 configuration or input
//! error, 3 fitting infeasible, 4 degenerate pipeline state.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use radhop::config::PipelineConfig;
use radhop::net::run_gradcheck;
use radhop::phantom::generate_dataset;
use radhop::pipeline;
use radhop::PipelineError;

#[derive(Parser)]
#[command(name = "radhop", version, about = "Two-stage lesion detection: data-driven radiomics candidates plus a residue-regression CNN")]
struct Cli {
    /// JSON configuration file; omitted fields fall back to defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// master seed; overrides the config file
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// stage-2 residue loss ("wrmse" or "mse"); overrides the config file
    #[arg(long, global = true)]
    loss: Option<String>,

    /// weighting exponent of the wrmse loss; overrides the config file
    #[arg(long, global = true)]
    gamma: Option<f64>,

    /// worker-thread request; results never depend on it
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with split manifests
    GenPhantoms,
    /// Fit the radiomics cascade, feature selection, and voxel classifier
    FitStage1,
    /// Fit the residue-regression network on stage-1 candidates
    FitStage2,
    /// Run both stages over the test split and write rois.json
    Infer,
    /// Score the test split with and without the stage-2 correction
    Evaluate {
        /// also write per-slice candidate overlays (PPM)
        #[arg(long)]
        overlays: bool,
    },
    /// Finite-difference check of the network backward pass
    Gradcheck {
        /// number of random configurations to check
        #[arg(long, default_value_t = 30)]
        seeds: u64,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(loss) = &cli.loss {
        cfg.stage2.loss = loss.clone();
    }
    if let Some(gamma) = cli.gamma {
        cfg.stage2.gamma = gamma;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &PipelineError) -> u8 {
    match err {
        PipelineError::FitInfeasible(_) => 3,
        PipelineError::Degenerate(_) => 4,
        _ => 2,
    }
}

fn run_gradcheck_cli(seeds: u64) -> Result<bool, PipelineError> {
    let mut all_passed = true;
    for seed in 0..seeds {
        for report in run_gradcheck(seed)? {
            let status = if report.passed { "ok" } else { "FAIL" };
            println!(
                "gradcheck seed={seed} loss={} max_rel_err={:.3e} {status}",
                report.loss, report.max_rel_err
            );
            if !report.passed {
                all_passed = false;
                for layer in &report.layers {
                    println!(
                        "  layer {} ({}): max_rel_err={:.3e} over {} probes",
                        layer.layer,
                        layer.op,
                        layer.max_rel_err,
                        layer.checks
                    );
                }
            }
        }
    }
    Ok(all_passed)
}

fn run(cli: &Cli) -> Result<u8, PipelineError> {
    match &cli.command {
        Command::GenPhantoms => {
            let cfg = load_config(cli)?;
            let manifests =
                generate_dataset(&cfg.phantom, cfg.n_cases, cfg.split, cfg.seed, &cfg.data_dir)?;
            println!(
                "wrote {} cases under {}",
                cfg.n_cases,
                cfg.data_dir.display()
            );
            for m in &manifests {
                println!("  manifest {}", m.display());
            }
            Ok(0)
        }
        Command::FitStage1 => {
            let cfg = load_config(cli)?;
            let summary = pipeline::fit_stage1(&cfg)?;
            println!(
                "stage 1 fitted on {} cases: raw features {:?}, kept {:?}",
                summary.n_train_cases, summary.f_raw, summary.n_selected
            );
            println!(
                "voxel dataset {} rows ({} positive), train auroc {:.4}",
                summary.dataset_rows, summary.dataset_positives, summary.train_auroc
            );
            println!("artifacts in {}", cfg.model_dir.display());
            Ok(0)
        }
        Command::FitStage2 => {
            let cfg = load_config(cli)?;
            let summary = pipeline::fit_stage2(&cfg)?;
            println!(
                "stage 2 ({}) fitted on {} ROIs ({} augmented samples), {} val ROIs",
                summary.loss, summary.n_train_rois, summary.n_train_samples, summary.n_val_rois
            );
            println!(
                "best val auroc {:.4} over {} epochs; artifacts in {}",
                summary.best_val_auroc,
                summary.epochs,
                cfg.model_dir.display()
            );
            Ok(0)
        }
        Command::Infer => {
            let cfg = load_config(cli)?;
            let results = pipeline::infer(&cfg)?;
            let n_rois: usize = results.iter().map(|r| r.rois.len()).sum();
            println!(
                "scored {} cases, {} candidates; report in {}",
                results.len(),
                n_rois,
                cfg.report_dir.join("rois.json").display()
            );
            Ok(0)
        }
        Command::Evaluate { overlays } => {
            let cfg = load_config(cli)?;
            let summary = pipeline::evaluate(&cfg, *overlays)?;
            println!(
                "evaluated {} cases ({} lesions), loss {}",
                summary.n_cases, summary.n_lesions, summary.loss
            );
            println!(
                "stage 1: lesion ap {:.4}, patient auroc {}",
                summary.stage1.lesion_ap,
                summary
                    .stage1
                    .patient_auroc
                    .map_or("n/a".to_string(), |a| format!("{a:.4}"))
            );
            println!(
                "stage 2: lesion ap {:.4}, patient auroc {}",
                summary.stage2.lesion_ap,
                summary
                    .stage2
                    .patient_auroc
                    .map_or("n/a".to_string(), |a| format!("{a:.4}"))
            );
            println!("report in {}", cfg.report_dir.join("eval.json").display());
            Ok(0)
        }
        Command::Gradcheck { seeds } => {
            let passed = run_gradcheck_cli(*seeds)?;
            if passed {
                println!("gradcheck passed for {seeds} seeds");
                Ok(0)
            } else {
                eprintln!("gradcheck FAILED");
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
