use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_lab::cli::{list_scenarios, run_scenario, Overrides, ScenarioConfig, EXIT_INVALID, EXIT_OK};

#[derive(Parser)]
#[command(name = "mfg-lab", version, about = "Mean field game scenario runner")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for Monte Carlo paths and sweep rows.
        #[arg(long, env = "MFG_LAB_THREADS")]
        threads: Option<usize>,
    },
    /// Print the scenario catalog.
    List,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match args.cmd {
        Cmd::List => {
            print!("{}", list_scenarios());
            ExitCode::SUCCESS
        }
        Cmd::Run { config, out, seed, threads } => {
            if let Some(n) = threads {
                if n == 0 {
                    eprintln!("error: --threads must be >= 1");
                    return ExitCode::from(EXIT_INVALID as u8);
                }
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not size thread pool: {e}");
                }
            }
            let cfg = match ScenarioConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_INVALID as u8);
                }
            };
            let outcome = run_scenario(&cfg, &Overrides { out_dir: out, seed });
            if let Some(m) = &outcome.message {
                eprintln!("error: {m}");
            }
            if outcome.code == EXIT_OK {
                if let Some(d) = &outcome.out_dir {
                    println!("{}", d.display());
                }
            }
            ExitCode::from(outcome.code as u8)
        }
    }
}
