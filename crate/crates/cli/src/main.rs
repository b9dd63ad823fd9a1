//! Command-line pipelines: synthesize or ingest data, train, generate meta
//! embeddings, serve, evaluate and sweep.

mod commands;
mod error;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Algorithm, CmdResult, EvalArgs, ServeArgs, SweepArgs};
use error::CliError;
use settings::Common;

#[derive(Debug, Parser)]
#[command(name = "limaml", version, about = "Meta-learned per-entity personalization pipelines")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/validation/test collections.
    Synthesize {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint, a metrics stream and a manifest.
    Train {
        #[arg(long, value_enum)]
        algorithm: Algorithm,
        /// Data directory (uses train.csv) or a data file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the meta block per task and write an embedding snapshot.
    Embedgen {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data directory (uses the `splits` setting) or a data file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score JSON-lines requests from stdin, a file or a TCP socket.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        /// zero or mean.
        #[arg(long)]
        fallback: Option<String>,
        /// Listen on this address instead of reading requests.
        #[arg(long, conflicts_with_all = ["input", "output"])]
        listen: Option<String>,
        /// Stop after this many socket connections.
        #[arg(long, requires = "listen")]
        max_connections: Option<usize>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare trained models with and without per-task fine-tuning.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vanilla: Option<PathBuf>,
        #[arg(long)]
        maml: Option<PathBuf>,
        #[arg(long)]
        limaml: Option<PathBuf>,
    },
    /// Train and evaluate across values of one hyperparameter.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// inner_steps, dropout, task_lr, global_lr or pooling.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Write a snapshot as tab-separated text.
    Export {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and compare output digests.
    Rerun { manifest: PathBuf },
}

fn run(cli: &Cli) -> CmdResult {
    let c = &cli.common;
    match &cli.command {
        Command::Synthesize { out } => commands::cmd_synthesize(c, out),
        Command::Train { algorithm, data, out } => commands::cmd_train(c, *algorithm, data, out),
        Command::Embedgen { checkpoint, data, out } => commands::cmd_embedgen(c, checkpoint, data, out),
        Command::Serve {
            checkpoint,
            snapshot,
            fallback,
            listen,
            max_connections,
            input,
            output,
        } => commands::cmd_serve(
            c,
            ServeArgs {
                checkpoint,
                snapshot,
                fallback: fallback.clone(),
                listen: listen.as_deref(),
                input: input.as_deref(),
                output: output.as_deref(),
                max_connections: *max_connections,
            },
        ),
        Command::Eval {
            data,
            out,
            vanilla,
            maml,
            limaml,
        } => commands::cmd_eval(
            c,
            EvalArgs {
                data,
                out,
                vanilla: vanilla.as_deref(),
                maml: maml.as_deref(),
                limaml: limaml.as_deref(),
            },
        ),
        Command::Sweep {
            data,
            out,
            param,
            values,
            replicates,
        } => commands::cmd_sweep(
            c,
            SweepArgs {
                data,
                out,
                param: param.clone(),
                values: values.clone(),
                replicates: *replicates,
            },
        ),
        Command::Export { snapshot, out } => commands::cmd_export(c, snapshot, out),
        Command::Rerun { manifest } => rerun(manifest),
    }
}

fn rerun(path: &std::path::Path) -> CmdResult {
    let old = manifest::read_manifest(path)?;
    let argv = std::iter::once("limaml".to_string()).chain(old.command.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::usage(format!("manifest command is invalid: {e}")))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        return Err(CliError::usage("a manifest cannot record a rerun".into()));
    }
    let new = run(&cli)?.ok_or_else(|| CliError::usage("the recorded command writes no manifest".into()))?;
    let mut differing = Vec::new();
    for (name, before) in &old.outputs {
        let after = new.outputs.get(name);
        let status = match (&before.sha256, after.and_then(|a| a.sha256.as_ref())) {
            (None, _) => "not compared (wall-clock content)",
            (Some(b), Some(a)) if a == b => "identical",
            _ => {
                differing.push(name.clone());
                "DIFFERS"
            }
        };
        println!("{name}: {status}");
    }
    if differing.is_empty() {
        Ok(Some(new))
    } else {
        Err(CliError::runtime(format!("outputs differ from the manifest: {}", differing.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
