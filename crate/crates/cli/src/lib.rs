//! Command-line front end: argument parsing, exit codes, and subcommands.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Exit code on success.
pub const EXIT_OK: i32 = 0;
/// Bad arguments or unknown subcommand.
pub const EXIT_USAGE: i32 = 1;
/// Invalid config, missing or malformed input data.
pub const EXIT_DATA: i32 = 2;
/// Failure while running (numeric trouble, unwritable output).
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<stylelab::Error> for CliError {
    fn from(e: stylelab::Error) -> Self {
        use stylelab::Error as E;
        match e {
            E::Format(_)
            | E::Corrupt(_)
            | E::HeadShape { .. }
            | E::HeadType { .. }
            | E::Data(_)
            | E::Split(_)
            | E::Param(_)
            | E::Length { .. }
            | E::EmptyInput
            | E::DegenerateStats(_)
            | E::Index { .. } => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stylelab", version, about = "Style-conditioned character transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat JSON run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read the corpus, report skipped lines, and write the vocabulary.
    Ingest(Common),
    /// Train the style-conditioned generator.
    TrainGen(Common),
    /// Fine-tune the section classifier on article titles.
    TrainClf(Common),
    /// Generate text from a prompt in a section's style.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Section name from the config table, or its numeric id.
        #[arg(long)]
        section: String,
        /// Release time as RFC 3339 (e.g. 2005-06-01T00:00:00Z) or unix seconds.
        #[arg(long)]
        time: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Predict the section of one or more titles.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long = "title", required = true)]
        titles: Vec<String>,
    },
    /// Embed classifier latents in 2-D and draw an SVG scatter.
    Project {
        #[command(flatten)]
        common: Common,
        /// Phrase cast onto the finished layout in black. Repeatable.
        #[arg(long = "overlay")]
        overlays: Vec<String>,
    },
    /// Report validation perplexity and accuracy for existing checkpoints.
    Eval(Common),
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Diagnostics go to standard error.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
