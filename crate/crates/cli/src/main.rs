//! `tactwin`: simulate datasets, calibrate and evaluate the sensor twin.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tactwin_core::config::ExperimentConfig;
use tactwin_core::experiment::{
    cmd_calibrate, cmd_evaluate, cmd_generate_layout, cmd_simulate, report_path,
};
use tactwin_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tactwin",
    version,
    about = "Two-layer colour-marker tactile sensor twin"
)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the protocol seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the marker layout CSV and a rest-state preview frame.
    GenerateLayout {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the full indentation protocol into a dataset directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Fit the calibration matrix on a dataset.
    Calibrate {
        /// Dataset directory.
        dataset: PathBuf,
        /// Calibration file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate curvature on every indented frame of a dataset.
    Evaluate {
        /// Dataset directory.
        dataset: PathBuf,
        /// Calibration file.
        #[arg(long)]
        calibration: PathBuf,
        /// Directory for results.csv, summary.csv and observations.csv.
        #[arg(long)]
        out: PathBuf,
        /// Exit with status 3 when the curvature estimates miss tolerance.
        #[arg(long)]
        check: bool,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.protocol.seed = Some(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::GeometryInfeasible(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenerateLayout { out } => {
            let layout = cmd_generate_layout(&cfg, &out)?;
            println!(
                "wrote {} marker pairs to {}",
                layout.len(),
                out.join("layout.csv").display()
            );
        }
        Command::Simulate { out, force } => {
            let manifest = cmd_simulate(&cfg, &out, force)?;
            println!(
                "wrote {} frames to {}",
                manifest.frames.len(),
                out.display()
            );
        }
        Command::Calibrate { dataset, out } => {
            let (_, report) = cmd_calibrate(&cfg, &dataset, &out)?;
            println!(
                "calibration: {} samples, rank {}, training rms {:.4} mm",
                report.samples, report.rank, report.training_rms_mm
            );
            if let Some(h) = report.heldout_rms_mm {
                println!("leave-one-trial-out rms {h:.4} mm");
            }
            for o in &report.per_object {
                println!(
                    "  {:<12} training {:.4} mm  held-out {}  object-only held-out {}",
                    o.object,
                    o.training_rms_mm,
                    o.heldout_rms_mm
                        .map_or("-".into(), |v| format!("{v:.4} mm")),
                    o.specific_heldout_rms_mm
                        .map_or("-".into(), |v| format!("{v:.4} mm")),
                );
            }
            println!(
                "wrote {} and {}",
                out.display(),
                report_path(&out).display()
            );
        }
        Command::Evaluate {
            dataset,
            calibration,
            out,
            check,
        } => {
            let report = cmd_evaluate(&cfg, &dataset, &calibration, &out)?;
            for s in report
                .summary
                .iter()
                .filter(|s| s.within_tolerance.is_some())
            {
                println!(
                    "{:<12} {:>6.2} mm  mean κ {:+.5} (true {:+.5}) ± {:.5} 1/mm  {}",
                    s.object,
                    s.indentation_mm,
                    s.mean_kappa_inv_mm,
                    s.true_kappa_inv_mm,
                    s.stddev_kappa_inv_mm,
                    if s.within_tolerance == Some(true) {
                        "ok"
                    } else {
                        "MISS"
                    }
                );
            }
            println!(
                "wrote {} estimate rows to {}",
                report.rows.len(),
                out.display()
            );
            if check && !report.passed() {
                for v in &report.violations {
                    eprintln!("check failed: {v}");
                }
                return Ok(EXIT_CHECK);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
