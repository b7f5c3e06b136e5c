use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use seqinsert::config::default_keys;
use seqinsert::ErrorKind;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "seqinsert", version, about = "Slice insertion network: place the slices of one volume into another")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides; flags win over the file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed of the subcommand's random stream (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the insertion network; writes metrics.csv, best.sqck and last.sqck.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split, or compare result files.
    Eval(EvalArgs),
    /// Predict insertion positions of every sampled query slice.
    Insert {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the score regression baseline.
    BprTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a baseline checkpoint, or compare result files.
    BprEval(EvalArgs),
    /// Write the attention map of one pair as CSV and PGM.
    ExportAttn {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        pgm: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory whose test split is evaluated.
    #[arg(long, requires = "ckpt", conflicts_with = "results")]
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate; its embedded config is used.
    #[arg(long, requires = "data")]
    pub ckpt: Option<PathBuf>,
    /// Results CSV to write.
    #[arg(long, requires = "data")]
    pub out: Option<PathBuf>,
    /// Existing results CSV; give two to run a Wilcoxon signed-rank test.
    #[arg(long, action = ArgAction::Append, required_unless_present = "data")]
    pub results: Vec<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn config_help() -> String {
    let mut text = String::from("Config keys (default):\n");
    for (k, v) in default_keys() {
        text.push_str(&format!("  {k} = {v}\n"));
    }
    text
}

fn main() -> ExitCode {
    let keys = config_help();
    let mut cmd = Cli::command().after_help(keys.clone());
    for name in ["synth", "train", "eval", "bpr-train", "bpr-eval"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys.clone()));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if e.use_stderr() {
                eprint!("error: {}", e.render().to_string().trim_start_matches("error: "));
            } else {
                let _ = e.print();
            }
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
