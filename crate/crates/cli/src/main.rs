//! `vidnoise` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a run fails (bad input data,
//! inconsistent configuration, failed checks), 2 on usage errors.

mod args;
mod commands;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use commands::Ctx;

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    // config echo: enough to reproduce the run
    eprintln!("{}", serde_json::to_string(&serde_json::json!({ "config": cli }))?);
    let ctx = Ctx {
        seed: cli.seed,
        dry_run: cli.dry_run,
        config_dir: cli.config_dir.as_deref(),
    };
    match &cli.command {
        Command::Calibrate(a) => commands::calibrate(&ctx, a)?,
        Command::Synth(a) => commands::synth(&ctx, a)?,
        Command::Render(a) => commands::render_cmd(&ctx, a)?,
        Command::Dataset(a) => commands::dataset_cmd(&ctx, a)?,
        Command::Metrics(a) => commands::metrics_cmd(&ctx, a)?,
        Command::Flow(a) => commands::flow_cmd(&ctx, a)?,
        Command::Rvdt(c) => return commands::rvdt_cmd(&ctx, c),
    }
    Ok(true)
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|p| p.contains(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version exit 0, everything else (including bare invocation) 2
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() || matches!(e.kind(), clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}
