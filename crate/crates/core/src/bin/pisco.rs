use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pisco::graphs::{build_topology, expected_mixing_rate, format_dense_matrix, metropolis_weights, TopologyKind};
use pisco::harness::{self, exit_code, ExperimentSpec, HarnessError};

#[derive(Parser, Debug)]
#[command(name = "pisco", version, about = "Semi-decentralized gradient tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every grid cell of an experiment spec and write CSVs and plots.
    Run {
        spec: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print mixing rates and planned step sizes without optimizing.
    Validate { spec: PathBuf },
    /// Re-render plots from a finished run directory.
    Plot { run_dir: PathBuf },
    /// Spectral quantities of a topology with Metropolis weights.
    Spectrum {
        #[arg(long, default_value = "ring")]
        topology: TopologyKind,
        #[arg(long, short)]
        n: usize,
        /// Edge probability (Erdos-Renyi).
        #[arg(long)]
        param: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Server probabilities to report lambda_p for.
        #[arg(long, value_delimiter = ',')]
        p: Vec<f64>,
        /// Also print the mixing matrix.
        #[arg(long)]
        matrix: bool,
    },
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Run { spec, out } => {
            let mut spec = ExperimentSpec::load(&spec)?;
            if let Some(out) = out {
                spec.output.dir = std::env::current_dir().map(|d| d.join(out)).unwrap_or_default();
            }
            let records = harness::run_experiment(&spec)?;
            let diverged = records.iter().filter(|r| r.diverged).count();
            println!("{} runs written to {}", records.len(), spec.output_dir().display());
            if diverged > 0 {
                println!("{diverged} runs diverged");
            }
            Ok(exit_code::OK)
        }
        Command::Validate { spec } => {
            let report = harness::validate(&ExperimentSpec::load(&spec)?)?;
            print!("{report}");
            Ok(if report.has_violations() { exit_code::ASSUMPTION } else { exit_code::OK })
        }
        Command::Plot { run_dir } => {
            for path in harness::plot_run_dir(&run_dir)? {
                println!("{}", path.display());
            }
            Ok(exit_code::OK)
        }
        Command::Spectrum { topology, n, param, seed, p, matrix } => {
            let g = build_topology(topology, n, param, seed)?;
            let w = metropolis_weights(&g);
            println!("topology: {topology} n={n} edges={} components={}", g.edge_count(), g.component_count());
            println!("lambda: {:.12}", w.lambda_second());
            println!("lambda_w: {:.12}", w.lambda_w());
            for p in p {
                println!("p={p} lambda_p: {:.12}", expected_mixing_rate(w.lambda_w(), p)?);
            }
            if matrix {
                print!("{}", format_dense_matrix(w.weights()));
            }
            Ok(exit_code::OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
