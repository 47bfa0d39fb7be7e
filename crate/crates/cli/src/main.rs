mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_taus, Overrides, RunConfig};
use error::{CliError, Result};

/// Train and analyse next-strategy predictors for support dialogues.
#[derive(Parser, Debug)]
#[command(name = "emodynamix", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Feature file path, or "fallback".
    #[arg(long, global = true, value_name = "path|fallback")]
    features: Option<String>,
    /// Enable an ablation; repeatable.
    #[arg(long, global = true, value_name = "name")]
    ablate: Vec<String>,
    #[arg(long, global = true, value_name = "dir")]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives single-threaded runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a separable synthetic corpus with planted features.
    Synth {
        #[arg(long, default_value_t = 600)]
        dialogues: usize,
        /// Shuffle emotion logits across user turns.
        #[arg(long)]
        scramble: bool,
    },
    /// Window and split the corpus; write samples and a split manifest.
    Ingest,
    /// Train a model and keep the best dev checkpoint.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long, value_name = "path")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export dummy-node attention traces for one split.
    Trace {
        #[arg(long, value_name = "path")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write one Graphviz file per sample.
        #[arg(long)]
        dot: bool,
    },
    /// Train the full model and every single ablation.
    Ablate,
    /// Train once per initial temperature.
    TauSweep {
        /// Comma-separated initial temperatures.
        #[arg(long, value_name = "list")]
        taus: Option<String>,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let g = cli.global;
    let mut o = Overrides {
        seed: g.seed,
        features: g.features,
        ablate: g.ablate,
        out: g.out,
        threads: g.threads,
        taus: None,
    };
    if let Command::TauSweep { taus: Some(t) } = &cli.command {
        o.taus = Some(parse_taus(t).map_err(|e| CliError::Usage(format!("--taus: {e}")))?);
    }
    let cfg = RunConfig::resolve(g.config.as_deref(), &o)?;
    match cli.command {
        Command::Synth { dialogues, scramble } => commands::synth(&cfg, dialogues, scramble),
        Command::Ingest => commands::ingest(&cfg),
        Command::Train => commands::train_cmd(cfg),
        Command::Eval { checkpoint, split } => commands::eval(cfg, checkpoint.as_deref(), &split),
        Command::Trace { checkpoint, split, dot } => {
            commands::trace(cfg, checkpoint.as_deref(), &split, dot)
        }
        Command::Ablate => commands::ablate(cfg),
        Command::TauSweep { .. } => commands::tau_sweep(cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
