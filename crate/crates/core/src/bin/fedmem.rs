use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmem_core::harness::{self, ExperimentConfig};
use fedmem_core::FedError;

#[derive(Parser)]
#[command(name = "fedmem", version, about = "Federated learning with local memorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config file without running it.
    Validate { config: PathBuf },
    /// Write the partitioned client datasets of a config to disk.
    ExportScenario {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Target directory (default: `<output_dir>/scenario`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &FedError) -> u8 {
    match e {
        FedError::Config(_) => 2,
        FedError::Io(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => ExperimentConfig::load(&config).and_then(|mut cfg| {
            harness::apply_overrides(&mut cfg, seed, out);
            let report = harness::run(&cfg)?;
            for row in &report.metrics {
                let settings: Vec<String> = row.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!(
                    "{:<8} {:<12} {:<24} weighted={:.4} unweighted={:.4} bottom10={:.4}",
                    row.group,
                    row.method,
                    settings.join(" "),
                    row.metrics.weighted,
                    row.metrics.unweighted,
                    row.metrics.bottom_decile
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(())
        }),
        Command::Validate { config } => ExperimentConfig::load(&config).map(|cfg| {
            println!("{}: ok (scenario {})", config.display(), cfg.scenario.name());
        }),
        Command::ExportScenario { config, seed, out } => ExperimentConfig::load(&config).and_then(|mut cfg| {
            harness::apply_overrides(&mut cfg, seed, None);
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("scenario"));
            let n = harness::export_scenario(&cfg, &dir)?;
            println!("wrote {n} clients to {}", dir.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
