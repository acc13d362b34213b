use std::path::PathBuf;
use std::process::ExitCode;

use atg_cli::commands::{self, Context};
use atg_cli::config::RunConfig;
use atg_cli::{exit, exit_code, split_overrides};
use clap::{Args, Parser, Subcommand};

/// Time series -> similarity graphs -> graph-attention + LSTM classifier.
///
/// Any config key may be overridden with `--key=value`.
#[derive(Parser)]
#[command(name = "atg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Manifest JSON path, `synthetic` or `synthetic:<seed>`
    #[arg(long, global = true)]
    data: Option<String>,
    /// Output directory
    #[arg(long, global = true, default_value = "atg-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained concurrently
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Entropy scan over candidate windows; writes window_scan.csv
    Scan,
    /// One graph file per labeled sample plus graph_summary.json
    BuildGraph,
    /// K-fold cross-validation, reports and a final model
    Train,
    /// Evaluate a saved model on a dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Train on --data (or load --model) and evaluate on --target
    CrossEval {
        #[arg(long)]
        target: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Welch t-test and two-sample KS test between --data and --target
    Stats {
        #[arg(long)]
        target: String,
    },
    /// Finite-difference check of every model gradient
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Use a reduced model instead of the default dimensions
        #[arg(long)]
        small: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, mut overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    if let Some(s) = cli.common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = cli.common.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    let cfg = match RunConfig::load(cli.common.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let ctx = Context { cfg, data: cli.common.data, out: cli.common.out };
    let result = match &cli.command {
        Command::Scan => commands::scan(&ctx),
        Command::BuildGraph => commands::build_graph(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval { model } => commands::eval(&ctx, model),
        Command::CrossEval { target, model } => commands::cross_eval_cmd(&ctx, target, model.as_deref()),
        Command::Stats { target } => commands::stats(&ctx, target),
        Command::GradCheck { eps, small } => match commands::grad_check(&ctx, *eps, *small) {
            Ok((true, msg)) => Ok(msg),
            Ok((false, msg)) => {
                println!("{msg}");
                eprintln!("error: gradient check failed");
                return ExitCode::from(exit::NUMERICAL as u8);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
