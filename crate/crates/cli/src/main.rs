use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sinklab_cli::config::{self, SEED_ENV};
use sinklab_cli::manifest::check_artifacts;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Attention-sink experiments on the Bigram-Backcopy task.
#[derive(Parser)]
#[command(name = "sinklab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the command named in a JSON config.
    ///
    /// The seed is taken from the file, then from BB_SINK_SEED if set, then from `--set seed=...`.
    Run {
        config: PathBuf,
        /// Override a dotted config path, e.g. `--set optim.steps=500`. Values are JSON, or bare strings.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorthand for `--set output_dir=...`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Re-hash the artifacts listed in a run directory's manifest. Writes nothing.
    Check { dir: PathBuf },
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { config, mut overrides, output_dir } => {
            if let Some(d) = output_dir {
                overrides.push(format!("output_dir={}", serde_json::Value::from(d.to_string_lossy())));
            }
            let env_seed = std::env::var(SEED_ENV).ok();
            let loaded = match config::load_file(&config, &overrides, env_seed.as_deref()) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match sinklab_cli::run(&loaded) {
                Ok(o) => {
                    if let Some(e) = &o.manifest.error {
                        eprintln!("error: {e}");
                    }
                    eprintln!("{}: {} -> {}", o.manifest.command, o.manifest.status, loaded.config.output_dir.display());
                    ExitCode::from(o.status.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", loaded.config.output_dir.display());
                    ExitCode::from(1)
                }
            }
        }
        Cmd::Check { dir } => match check_artifacts(&dir) {
            Ok(bad) if bad.is_empty() => {
                println!("all artifacts match");
                ExitCode::SUCCESS
            }
            Ok(bad) => {
                bad.iter().for_each(|b| println!("{b}"));
                ExitCode::from(1)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
