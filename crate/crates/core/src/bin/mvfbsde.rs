use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use mvfbsde::harness::{error_json, exit_code_for, run, Subcommand, EXIT_CONFIG};
use mvfbsde::Error;

#[derive(Parser, Debug)]
#[command(name = "mvfbsde", version, about = "Discounted McKean-Vlasov FBSDE experiments")]
struct Cli {
    /// One of: solve, lions, fdcheck, uniqueness, validate-lq, convergence.
    subcommand: String,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

fn fail(err: &Error) -> ExitCode {
    println!("{}", error_json(err));
    ExitCode::from(exit_code_for(err) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            println!("{}", json!({ "error": { "kind": "config", "message": msg.trim(), "exit_code": EXIT_CONFIG } }));
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let cmd: Subcommand = match cli.subcommand.parse() {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let go = || run(cmd, &cli.config, cli.seed, &cli.out);
    let result = match cli.workers {
        #[cfg(feature = "parallel")]
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(go),
            Err(e) => Err(Error::Config(format!("cannot start {n} workers: {e}"))),
        },
        _ => go(),
    };
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => fail(&e),
    }
}
