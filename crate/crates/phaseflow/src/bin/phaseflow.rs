//! Command-line driver for the two phase-field flow models.

use clap::Parser;
use phaseflow::sim_cli::config::{parse_config, InitialKind, Model, SimConfig};
use phaseflow::sim_cli::{check_only, run_simulation, ExitStatus};
use std::path::PathBuf;
use std::process::exit;

#[derive(Parser, Debug)]
#[command(
    name = "phaseflow",
    about = "2D two-phase flow with phase transition: energy-stable implicit steppers"
)]
struct Cli {
    /// Configuration file (TOML; see README for the grammar).
    #[arg(long)]
    config: PathBuf,

    /// Override the configured model (agg | qstokes).
    #[arg(long)]
    model: Option<String>,

    /// Override the configured number of time steps.
    #[arg(long)]
    steps: Option<usize>,

    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the random-initial-condition seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Run the structural invariant suite on the configuration, write no output.
    #[arg(long)]
    check_only: bool,
}

fn main() {
    let cli = Cli::parse();

    let mut cfg: SimConfig<f64> = match parse_config(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            exit(ExitStatus::ConfigError.code());
        }
    };

    if let Some(model) = &cli.model {
        cfg.model = match model.as_str() {
            "agg" => Model::Agg,
            "qstokes" => Model::QStokes,
            other => {
                eprintln!("config error: --model must be agg or qstokes, got {other}");
                exit(ExitStatus::ConfigError.code());
            }
        };
        if cfg.model == Model::QStokes && cfg.params.gamma <= 0.0 {
            eprintln!("config error: model qstokes requires physics.gamma > 0");
            exit(ExitStatus::ConfigError.code());
        }
    }
    if let Some(steps) = cli.steps {
        if steps == 0 {
            eprintln!("config error: --steps must be >= 1");
            exit(ExitStatus::ConfigError.code());
        }
        cfg.n_steps = steps;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        if let InitialKind::Random {
            mean, amplitude, ..
        } = cfg.initial.kind
        {
            cfg.initial.kind = InitialKind::Random {
                mean,
                amplitude,
                seed,
            };
        }
    }

    if cli.check_only {
        match check_only(&cfg) {
            Ok(()) => {
                println!("all checks passed");
                exit(ExitStatus::Success.code());
            }
            Err(e) => {
                eprintln!("{e}");
                exit(e.exit_status().code());
            }
        }
    }

    match run_simulation(&cfg) {
        Ok(summary) => {
            let last = summary.records.last().expect("at least the initial record");
            println!(
                "completed {} steps of model {}: E_tot {:.6e}, mean(phi) {:.6e}, diagnostics in {}",
                last.step,
                cfg.model,
                last.e_tot,
                last.mean_phi,
                summary.csv_path.display()
            );
            exit(ExitStatus::Success.code());
        }
        Err(e) => {
            eprintln!("{e}");
            exit(e.exit_status().code());
        }
    }
}
