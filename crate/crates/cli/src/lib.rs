//! Command-line front end: configuration, data loading and subcommands.

pub mod commands;
pub mod config;
pub mod pipeline;

use atg_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Data { .. } => exit::IO,
        Error::Numerical(_) => exit::NUMERICAL,
        _ => exit::USAGE,
    }
}

const COMMON_FLAGS: [&str; 5] = ["config", "data", "out", "seed", "threads"];

/// Pulls `--key=value` config overrides out of the argument list.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let keys = config::config_keys();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            let key = k.replace('-', "_");
            if keys.contains(&key) && !COMMON_FLAGS.contains(&key.as_str()) {
                overrides.push((key, v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}
