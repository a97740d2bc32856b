//! `parametrix` binary: runs density/sweep experiments from flat
//! key-value config files and prints the built-in catalog.
//!
//! Exit codes: `0` when the run finishes and every requested audit passes,
//! `1` when an audit fails, `2` for usage or configuration errors, `3` for
//! engine failures.  No environment variables are consulted; parallelism
//! is controlled only by `--threads`.

mod catalog;
mod config;
mod experiments;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use experiments::{CliError, RunContext};

#[derive(Parser)]
#[command(
    name = "parametrix",
    version,
    about = "Transition-density engines, cross-engine comparisons, and stability sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a config file
    Run(RunArgs),
    /// List built-in coefficient families, perturbations, payoffs, and laws
    Catalog,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the flat key-value config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV reports and the manifest
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the seed declared in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; omitted or 0 keeps the library default
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let code = match cli.command {
        Command::Catalog => {
            print!("{}", catalog::listing());
            0
        }
        Command::Run(args) => match run(args) {
            Ok(failed_audits) => {
                if failed_audits == 0 {
                    0
                } else {
                    1
                }
            }
            Err(CliError::Usage(msg)) => {
                eprintln!("{msg}");
                2
            }
            Err(CliError::Engine(msg)) => {
                eprintln!("{msg}");
                3
            }
        },
    };
    std::process::exit(code);
}

fn run(args: RunArgs) -> Result<usize, CliError> {
    let bytes = std::fs::read(&args.config).map_err(|e| {
        CliError::Usage(format!(
            "config error: cannot read `{}`: {e}",
            args.config.display()
        ))
    })?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Usage("config error: file is not valid UTF-8".into()))?;
    let config_sha = hex(&Sha256::digest(&bytes));
    let raw = config::RawConfig::parse(&text)?;

    let cfg_seed = raw.section("experiment").u64_or("seed", 0)?;
    let seed = args.seed.unwrap_or(cfg_seed);
    let threads = args.threads.unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Engine(format!("thread pool: {e}")))?;
    }

    let out_dir = match args.out {
        Some(dir) => dir,
        None => raw
            .section("output")
            .str_opt("dir")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Usage(format!("config error: cannot create `{}`: {e}", out_dir.display())))?;

    let ctx = RunContext {
        raw: &raw,
        out_dir: &out_dir,
        seed,
        threads,
        config_sha,
    };
    let outcome = experiments::run(&ctx)?;
    for file in &outcome.files {
        println!("wrote {}", file.display());
    }
    println!("audits_failed = {}", outcome.audits_failed);
    Ok(outcome.audits_failed)
}

fn hex(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
