use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use rotorsense::detect::DetectorKind;
use rotorsense::io::EventFormat;
use rotorsense::FlightProfile;
use rotorsense_cli as cli;

#[derive(Parser)]
#[command(name = "rotorsense", version, about = "Quadrotor state estimation from propeller events")]
struct Args {
    /// Pipeline config file (`section.key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config detector
    #[arg(long, global = true, value_enum)]
    detector: Option<Detector>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Detector {
    Cc,
    Cluster,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Bin,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence
    Simulate {
        #[arg(long, default_value = "hover")]
        profile: FlightProfile,
        /// Seconds
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, value_enum, default_value = "bin")]
        events_format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate RPM, position and attitude from an event file
    Estimate {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        observer: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimates against ground truth; exits 1 when a threshold is violated
    Metrics {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Short in-memory end-to-end check
    Selftest,
}

fn run(args: Args) -> Result<bool> {
    let mut cfg = cli::load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(d) = args.detector {
        cfg.detector = match d {
            Detector::Cc => DetectorKind::Cc,
            Detector::Cluster => DetectorKind::Cluster,
        };
    }
    match args.command {
        Command::Simulate {
            profile,
            duration,
            events_format,
            out,
        } => {
            anyhow::ensure!(duration >= 0.0 && duration.is_finite(), "duration must be a non-negative number of seconds");
            let format = match events_format {
                Format::Bin => EventFormat::Binary,
                Format::Csv => EventFormat::Csv,
            };
            let s = cli::cmd_simulate(&cfg, profile, (duration * 1e6).round() as u64, &out, format)?;
            println!("wrote {} events and {} ground-truth rows to {}", s.n_events, s.n_states, out.display());
            println!("config_sha256 = {}", s.config_sha256);
            Ok(true)
        }
        Command::Estimate { events, observer, out } => {
            let stats = cli::cmd_estimate(&cfg, &events, &observer, &out)?;
            println!("{}", stats.log_line());
            Ok(true)
        }
        Command::Metrics {
            estimates,
            ground_truth,
            out,
        } => {
            let outcome = cli::cmd_metrics(&cfg, &estimates, &ground_truth, out.as_deref())?;
            print!("{}", outcome.report.to_key_values());
            for v in &outcome.violations {
                eprintln!("threshold violated: {v}");
            }
            Ok(outcome.passed())
        }
        Command::Selftest => {
            let (lines, ok) = cli::selftest(&cfg)?;
            for l in lines {
                println!("{l}");
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
