use std::path::PathBuf;
use std::process::ExitCode;

use cht_cli::commands::{self, CheckKind, EvalOverrides, ProtocolChoice};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cht", version, about = "Continual weight generation for few-shot tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator from a config file.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to $CHT_RUN_DIR/<output.name>.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out classes.
    Eval(EvalArgs),
    /// Train and evaluate the fixed-embedding prototypical baseline.
    BaselineConstpn {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Protocol::Both)]
        protocol: Protocol,
    },
    /// Evaluate a checkpoint on merged supports, one generation per step.
    BaselineMerged(EvalArgs),
    /// Run a numerical verifier: maml, gradients or oracles.
    Check { which: CheckKind },
    /// Write prototype and query embeddings of one held-out sequence as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set train.T=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or a run directory for its newest checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config to use instead of the one stored with the run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = Protocol::Both)]
    protocol: Protocol,
    /// Number of test tasks; may exceed the trained length.
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory for metrics.csv and plots.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalArgs {
    fn overrides(&self) -> EvalOverrides {
        EvalOverrides {
            tasks: self.tasks,
            seed: self.seed,
            episodes: self.episodes,
            runs_per_episode: self.runs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    TaskIncremental,
    ClassIncremental,
    Both,
}

impl From<Protocol> for ProtocolChoice {
    fn from(p: Protocol) -> Self {
        match p {
            Protocol::TaskIncremental => ProtocolChoice::TaskIncremental,
            Protocol::ClassIncremental => ProtocolChoice::ClassIncremental,
            Protocol::Both => ProtocolChoice::Both,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, run_dir } => {
            let dir = commands::train(&config.config, &config.overrides, run_dir.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Eval(a) => {
            let out = commands::eval(
                &a.checkpoint,
                a.config.as_deref(),
                &a.overrides,
                a.protocol.into(),
                &a.overrides(),
                a.out.as_deref(),
            )?;
            println!("{}", out.dir.display());
        }
        Command::BaselineConstpn {
            config,
            run_dir,
            protocol,
        } => {
            let out =
                commands::baseline_constpn(&config.config, &config.overrides, run_dir.as_deref(), protocol.into())?;
            println!("{}", out.dir.display());
        }
        Command::BaselineMerged(a) => {
            let out = commands::baseline_merged(
                &a.checkpoint,
                a.config.as_deref(),
                &a.overrides,
                a.protocol.into(),
                &a.overrides(),
                a.out.as_deref(),
            )?;
            println!("{}", out.dir.display());
        }
        Command::Check { which } => {
            commands::check(which)?;
        }
        Command::ExportEmbeddings {
            checkpoint,
            config,
            overrides,
            tasks,
            seed,
            out,
        } => {
            let eo = EvalOverrides {
                tasks,
                seed,
                ..Default::default()
            };
            commands::export(&checkpoint, config.as_deref(), &overrides, &eo, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
