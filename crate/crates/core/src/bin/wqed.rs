//! Command-line runner for the waveguide-QED scenarios.
//!
//! ```text
//! wqed run <config.json> [--seed N] [--shots N] [--out DIR]
//! wqed report <dir>
//! wqed selftest
//! wqed preset <scenario>
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wqed::scenario::{default_output_dir, run_scenario, selftest, RunReport, Scenario, ScenarioConfig, FAILED_MARKER};
use wqed::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "wqed", version, about = "Waveguide-QED photon tomography and spectroscopy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario described by a JSON configuration.
    Run {
        config: PathBuf,
        /// Override the configuration seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the signal shot count (ground shots follow unless set).
        #[arg(long)]
        shots: Option<usize>,
        /// Output directory (overrides the config and WQED_OUTPUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary of a finished run directory.
    Report { dir: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
    /// Print the canonical configuration of a scenario.
    Preset {
        scenario: String,
        /// Use the high-noise chain (n_noise ≈ 8) with 5·10⁷ shots.
        #[arg(long)]
        high_noise: bool,
    },
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("configuration error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("WQED_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| format!("WQED_THREADS must be a positive integer, got '{value}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(config: PathBuf, seed: Option<u64>, shots: Option<usize>, out: Option<PathBuf>) -> ExitCode {
    let mut cfg = match ScenarioConfig::load(&config) {
        Ok(cfg) => cfg,
        Err(e) => return config_error(e),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(shots) = shots {
        cfg.n_shots = shots;
    }
    let env_dir = std::env::var_os("WQED_OUTPUT_DIR").map(PathBuf::from);
    cfg.output_dir = out.or(env_dir).or(cfg.output_dir.take());
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(default_output_dir(&cfg));
    }
    if let Err(e) = cfg.validate() {
        return config_error(e);
    }
    let dir = cfg.output_dir.clone().unwrap_or_default();
    match run_scenario(&cfg) {
        Ok(report) => {
            print!("{}", report.summary());
            println!("output      {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Stage { .. }) => {
            eprintln!("{e}");
            eprintln!("partial outputs marked in {}", dir.join(FAILED_MARKER).display());
            ExitCode::from(EXIT_STAGE)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}

fn report(dir: PathBuf) -> ExitCode {
    let failed = dir.join(FAILED_MARKER);
    if failed.exists() {
        match std::fs::read_to_string(&failed) {
            Ok(text) => eprintln!("run failed:\n{text}"),
            Err(e) => eprintln!("run failed ({e})"),
        }
        return ExitCode::from(EXIT_STAGE);
    }
    match RunReport::load(&dir.join("report.json")) {
        Ok(report) => {
            print!("{}", report.summary());
            ExitCode::SUCCESS
        }
        Err(e) => config_error(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        return config_error(e);
    }
    match cli.command {
        Command::Run {
            config,
            seed,
            shots,
            out,
        } => run(config, seed, shots, out),
        Command::Report { dir } => report(dir),
        Command::Selftest => {
            let results = selftest();
            let mut failed = 0;
            for r in &results {
                println!("{} {:<32} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            println!("{}/{} checks passed", results.len() - failed, results.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_STAGE)
            }
        }
        Command::Preset { scenario, high_noise } => {
            let scenario = match Scenario::from_name(&scenario) {
                Ok(s) => s,
                Err(e) => return config_error(e),
            };
            let cfg = if high_noise {
                ScenarioConfig::high_noise_preset(scenario)
            } else {
                ScenarioConfig::preset(scenario)
            };
            match cfg.to_json() {
                Ok(text) => {
                    println!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => config_error(e),
            }
        }
    }
}
