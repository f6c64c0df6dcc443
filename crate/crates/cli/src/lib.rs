//! Config-driven runner for the `sinklab` experiments.

pub mod commands;
pub mod config;
pub mod manifest;

use std::time::Instant;

use commands::{Report, Status};
use config::Loaded;
use manifest::{Manifest, Outputs, MANIFEST_FILE, MANIFEST_SCHEMA};

/// Result of [`run`]: the exit status and the manifest that was written.
#[derive(Debug)]
pub struct RunOutcome {
    pub status: Status,
    pub manifest: Manifest,
}

/// Execute `loaded` and write its artifacts and manifest into `output_dir`.
pub fn run(loaded: &Loaded) -> std::io::Result<RunOutcome> {
    let cfg = &loaded.config;
    let start = Instant::now();
    let mut out = Outputs::create(&cfg.output_dir)?;
    let mut report = Report::default();
    let (status, error) = match commands::execute(cfg, &mut out, &mut report) {
        Ok(()) if report.checks_failed => (Status::ChecksFailed, None),
        Ok(()) => (Status::Ok, None),
        Err(e) => (Status::of_error(&e), Some(e.to_string())),
    };
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        command: cfg.command.as_str().into(),
        status: status.as_str().into(),
        exit_code: status.exit_code(),
        seed: cfg.seed,
        seed_source: serde_json::to_value(loaded.seed_source)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(cfg).map_err(std::io::Error::other)?,
        task: report.task.take(),
        wall_time_s: start.elapsed().as_secs_f64(),
        artifacts: out.artifacts().to_vec(),
        metrics: std::mem::take(&mut report.metrics),
        error,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(out.dir().join(MANIFEST_FILE), text)?;
    Ok(RunOutcome { status, manifest })
}
