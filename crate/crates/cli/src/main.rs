mod commands;
mod config;
mod manifest;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reprosv_core::train::Mode;

use commands::{Invocation, Outcome};
use config::RunConfig;
use manifest::RunManifest;

/// A mistake on the caller's side (bad config, missing input, refused
/// overwrite), reported with exit code 1 rather than 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "reprosv", version, about = "Reprogram frozen speaker-embedding models with learnable input padding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Run directory; all outputs and the run manifest go here
    #[arg(long)]
    out: PathBuf,
    /// Overrides `seed` from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty run directory
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptMode {
    Vanilla,
    GradEst,
}

impl From<AdaptMode> for Mode {
    fn from(m: AdaptMode) -> Mode {
        match m {
            AdaptMode::Vanilla => Mode::AdaptVanilla,
            AdaptMode::GradEst => Mode::AdaptGradEst,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cross-domain corpus and trial lists
    GenData(Common),
    /// Train the backbone and classifier on the source domain, then freeze it
    Pretrain(Common),
    /// Learn a padding (and head) on the target domain, then evaluate
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<AdaptMode>,
    },
    /// Evaluate a model, optionally with a learned padding
    Eval {
        #[command(flatten)]
        common: Common,
        /// Padding checkpoint; overrides `model.padding`
        #[arg(long)]
        padding: Option<PathBuf>,
    },
    /// Adapt and evaluate every (mode, n, k) cell of the configured grid
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<AdaptMode>,
    },
    /// Merge results CSVs into a markdown table and per-mode plot data
    Report {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Re-execute a run from its manifest into a new run directory
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn configured(name: &str, common: &Common, mode: Option<Mode>) -> anyhow::Result<(Invocation, PathBuf, bool)> {
    let config = RunConfig::load(&common.config, common.seed)?;
    let inv = Invocation {
        command: name.into(),
        mode,
        config,
        report_inputs: Vec::new(),
    };
    Ok((inv, common.out.clone(), common.force))
}

fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    let (inv, out, force) = match cli.command {
        Command::GenData(c) => configured("gen-data", &c, None)?,
        Command::Pretrain(c) => configured("pretrain", &c, None)?,
        Command::Adapt { common, mode } => configured("adapt", &common, mode.map(Mode::from))?,
        Command::Eval { common, padding } => {
            let (mut inv, out, force) = configured("eval", &common, None)?;
            if let Some(p) = padding {
                inv.config.model.padding = Some(std::path::absolute(p)?);
            }
            (inv, out, force)
        }
        Command::Sweep { common, mode } => configured("sweep", &common, mode.map(Mode::from))?,
        Command::Report { csvs, out, force } => {
            let report_inputs = csvs.iter().map(std::path::absolute).collect::<Result<_, _>>()?;
            let inv = Invocation {
                command: "report".into(),
                mode: None,
                config: RunConfig::default(),
                report_inputs,
            };
            (inv, out, force)
        }
        Command::Rerun { manifest, out, force } => {
            (Invocation::from_manifest(RunManifest::load(&manifest)?), out, force)
        }
    };
    inv.run(&out, force)
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<reprosv_core::Error>(),
                Some(reprosv_core::Error::Config(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(failed)) => {
            eprintln!("warning: {failed} sweep cell(s) failed; see cells.log");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 1 } else { 2 })
        }
    }
}
