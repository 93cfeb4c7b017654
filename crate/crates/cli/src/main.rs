use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedmate_core::harness::{self, Method, RunConfig};

#[derive(Parser)]
#[command(
    name = "fedmate",
    version,
    about = "Deterministic personalized federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation from a key=value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configs and print their final metrics side by side.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
    },
    /// Run the built-in oracle and property checks.
    Selftest,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: fedmate_core::Error| e.to_string())
}

fn load(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(config: PathBuf, seed: Option<u64>, method: Option<Method>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let result = harness::run_simulation(&cfg)?;
    print!(
        "{}",
        harness::compare_summary(&[(config.display().to_string(), &result)])
    );
    if let Some(dir) = &cfg.output_dir {
        println!("outputs written to {}", dir.display());
    }
    Ok(())
}

fn compare(configs: Vec<PathBuf>) -> Result<()> {
    let mut results = Vec::new();
    for path in &configs {
        let cfg = load(path)?;
        let r = harness::run_simulation(&cfg).with_context(|| format!("running {}", path.display()))?;
        results.push((path.display().to_string(), r));
    }
    let refs: Vec<(String, &harness::RunResult)> = results.iter().map(|(l, r)| (l.clone(), r)).collect();
    print!("{}", harness::compare_summary(&refs));
    Ok(())
}

fn selftest() -> bool {
    let mut ok = true;
    for c in fedmate_core::selftest::run_all() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    ok
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            seed,
            method,
            out,
        } => run(config, seed, method, out),
        Command::Compare { configs } => compare(configs),
        Command::Selftest => {
            return if selftest() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
