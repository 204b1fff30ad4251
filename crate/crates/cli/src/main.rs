use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use stmca::scenario::{load_scenario, run_scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "stmca", version, about = "Simulate diffusions on metric graphs from scenario files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the grid and kernel, run the ensemble and write artifacts.
    Run {
        scenario: PathBuf,
        /// Overrides `run.master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every sampled path.
        #[arg(long)]
        paths: bool,
        /// Run the self-convergence study from the `convergence` section.
        #[arg(long)]
        convergence: bool,
        /// Overrides `kernel.quad_panels`.
        #[arg(long)]
        quad_panels: Option<usize>,
        /// Overrides `run.n_paths`.
        #[arg(long)]
        n_paths: Option<usize>,
    },
    /// Parse and validate a scenario without running it.
    Check { scenario: PathBuf },
}

fn report(err: &ScenarioError) -> ExitCode {
    let doc = serde_json::json!({ "error": { "kind": err.kind(), "message": err.to_string() } });
    eprintln!("{doc}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Check { scenario } => match load_scenario(&scenario) {
            Ok(sc) => {
                println!("{}: ok", sc.name);
                ExitCode::SUCCESS
            }
            Err(e) => report(&e),
        },
        Command::Run {
            scenario,
            seed,
            out,
            paths,
            convergence,
            quad_panels,
            n_paths,
        } => {
            let mut sc = match load_scenario(&scenario) {
                Ok(sc) => sc,
                Err(e) => return report(&e),
            };
            if let Some(seed) = seed {
                sc.run.master_seed = seed;
            }
            if let Some(out) = out {
                sc.output.dir = out;
            }
            sc.output.paths |= paths;
            if let Some(n) = quad_panels {
                sc.kernel.quad_panels = n;
            }
            if let Some(n) = n_paths {
                sc.run.n_paths = n;
            }
            if let Err(e) = sc.validate() {
                return report(&e);
            }
            match run_scenario(&sc, convergence) {
                Ok(summary) => {
                    println!("{}", summary.line());
                    ExitCode::SUCCESS
                }
                Err(e) => report(&e),
            }
        }
    }
}
