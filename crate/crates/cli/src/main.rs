//! Command-line front end for the segmentation pipeline.

mod args;
mod commands;
mod config;

use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use attnseg::Error;
use clap::Parser;

use args::{Cli, Command};

/// Exit code and machine-readable kind for an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Csv(_) | Error::Manifest(_) | Error::Checkpoint(_) => {
            (2, "io")
        }
        Error::Json(_) => (2, "io"),
        Error::Numerical { .. } => (3, "numerical"),
        _ => (1, "config"),
    }
}

fn report(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("ATTNSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("ATTNSEG_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Timestamps live here and nowhere else, so other outputs stay reproducible.
fn append_log(out: &std::path::Path, command: &str, started: SystemTime) {
    let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let line = format!(
        "{command} started={} finished={} elapsed_s={:.3}\n",
        secs(started),
        secs(SystemTime::now()),
        started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0)
    );
    use std::io::Write;
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(out.join("run.log")) {
        let _ = f.write_all(line.as_bytes());
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report("config", 1, first);
        }
    };
    if let Err(msg) = configure_threads() {
        return report("config", 1, &msg);
    }
    let started = SystemTime::now();
    let (name, out, result) = match &cli.command {
        Command::Train(c) => ("train", Some(&c.out), commands::train_cmd(c)),
        Command::Ablate(c) => ("ablate", Some(&c.out), commands::ablate_cmd(c)),
        Command::Eval(c) => ("eval", Some(&c.out), commands::eval_cmd(c)),
        Command::Overlay(c) => ("overlay", Some(&c.out), commands::overlay_cmd(c)),
        Command::Stats(c) => ("stats", Some(&c.out), commands::stats_cmd(c)),
        Command::Synth(c) => ("synth", None, commands::synth_cmd(c)),
        Command::Params(c) => ("params", None, commands::params_cmd(c)),
        Command::Gradcheck(c) => match commands::gradcheck_cmd(c) {
            Ok(true) => ("gradcheck", None, Ok(())),
            Ok(false) => {
                return report("numerical", 3, "gradient check exceeded tolerance");
            }
            Err(e) => ("gradcheck", None, Err(e)),
        },
    };
    match result {
        Ok(()) => {
            if let Some(dir) = out {
                append_log(dir, name, started);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, kind) = classify(&e);
            report(kind, code, &e.to_string())
        }
    }
}
