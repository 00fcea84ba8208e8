//! cosserat-lab: minimize the Cosserat micropolar energy on box grids,
//! diagnose computed states, and sweep parameter ranges.
//!
//! ```text
//! cosserat-lab minimize <config.toml> [--seed N] [--out DIR] [--verbose]
//! cosserat-lab diagnose <config.toml> --phi <phi.csrf> --rot <rot.csrf>
//!                       [--seed N] [--out DIR] [--verbose]
//! cosserat-lab sweep    <config.toml> [--seed N] [--out DIR] [--threads N]
//! ```
//!
//! Exit codes: 0 success, 1 usage/config error, 2 partial result (budget
//! exhausted before the residual target; best state still written).
//! `COSSERAT_LAB_THREADS` sets the default thread count for sweeps.

mod commands;
mod config;
mod expr;

use commands::{cmd_diagnose, cmd_minimize, cmd_sweep, Overrides, EXIT_USAGE};
use std::path::PathBuf;

const USAGE: &str = "usage:
  cosserat-lab minimize <config.toml> [--seed N] [--out DIR] [--verbose]
  cosserat-lab diagnose <config.toml> --phi <path> --rot <path> [--seed N] [--out DIR] [--verbose]
  cosserat-lab sweep    <config.toml> [--seed N] [--out DIR] [--threads N] [--verbose]";

fn main() {
    std::process::exit(run(std::env::args().skip(1).collect()));
}

fn run(args: Vec<String>) -> i32 {
    let mut it = args.into_iter();
    let sub = match it.next() {
        Some(s) => s,
        None => {
            eprintln!("{USAGE}");
            return EXIT_USAGE;
        }
    };
    let mut config: Option<PathBuf> = None;
    let mut phi: Option<PathBuf> = None;
    let mut rot: Option<PathBuf> = None;
    let mut ov = Overrides {
        seed: None,
        out: None,
        threads: default_threads(),
        verbose: false,
    };

    let mut rest = it.peekable();
    while let Some(arg) = rest.next() {
        match arg.as_str() {
            "--seed" => match rest.next().and_then(|v| v.parse().ok()) {
                Some(v) => ov.seed = Some(v),
                None => return usage_err("--seed needs an integer"),
            },
            "--out" => match rest.next() {
                Some(v) => ov.out = Some(PathBuf::from(v)),
                None => return usage_err("--out needs a path"),
            },
            "--threads" => match rest.next().and_then(|v| v.parse().ok()) {
                Some(v) if v >= 1 => ov.threads = v,
                _ => return usage_err("--threads needs a positive integer"),
            },
            "--phi" => match rest.next() {
                Some(v) => phi = Some(PathBuf::from(v)),
                None => return usage_err("--phi needs a path"),
            },
            "--rot" => match rest.next() {
                Some(v) => rot = Some(PathBuf::from(v)),
                None => return usage_err("--rot needs a path"),
            },
            "--verbose" => ov.verbose = true,
            other if config.is_none() && !other.starts_with("--") => {
                config = Some(PathBuf::from(other));
            }
            other => return usage_err(&format!("unexpected argument '{other}'")),
        }
    }

    let config = match config {
        Some(c) => c,
        None => return usage_err("missing config path"),
    };

    match sub.as_str() {
        "minimize" => cmd_minimize(&config, &ov),
        "diagnose" => {
            let (Some(phi), Some(rot)) = (phi, rot) else {
                return usage_err("diagnose needs --phi and --rot snapshot paths");
            };
            cmd_diagnose(&config, &phi, &rot, &ov)
        }
        "sweep" => cmd_sweep(&config, &ov),
        other => usage_err(&format!("unknown subcommand '{other}'")),
    }
}

fn usage_err(msg: &str) -> i32 {
    eprintln!("error: {msg}\n{USAGE}");
    EXIT_USAGE
}

fn default_threads() -> usize {
    std::env::var("COSSERAT_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
