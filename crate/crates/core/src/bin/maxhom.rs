use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use maxhom::experiment::{exit_code, run_scenario, Overrides, Scenario};

/// Stochastic homogenization experiments for nonlinear Maxwell systems.
#[derive(Parser, Debug)]
#[command(name = "maxhom", version)]
struct Cli {
    scenario: Scenario,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; falls back to MAXHOM_WORKERS, then the config, then all cores.
    #[arg(long, env = "MAXHOM_WORKERS")]
    workers: Option<usize>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return ExitCode::from(2);
        }
    };
    let workers = cli.workers.or_else(|| {
        maxhom::config::parse_config(&text).ok().and_then(|c| c.workers)
    });
    if let Some(w) = workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let result = run_scenario(
        cli.scenario,
        &text,
        &cli.out,
        Overrides {
            seed: cli.seed,
            workers,
        },
    );
    match &result {
        Ok(o) => {
            for c in &o.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{}", if o.pass() { "PASS" } else { "FAIL" });
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
