//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::context::{Context, Options};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "milx", version, about = "Attention-MIL training, attribution and faithfulness benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(Common),
    /// Train the MIL model (one or more runs).
    Train {
        #[command(flatten)]
        common: Common,
        /// Record Unix timestamps in the training log.
        #[arg(long)]
        timestamps: bool,
    },
    /// Compute attribution maps and overlays.
    Explain(Common),
    /// Run insertion/deletion, localization and ROAR benchmarks.
    Bench(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Global seed; overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Common {
    fn options(&self, timestamps: bool) -> Options {
        Options { config: self.config.clone(), seed: self.seed, out: self.out.clone(), force: self.force, timestamps }
    }
}

fn init_pool(jobs: Option<usize>) -> Result<()> {
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        // A pool built earlier in the same process (tests) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            init_pool(c.jobs)?;
            crate::generate::run(&Context::new(c.options(false))?).map(|_| ())
        }
        Command::Train { common, timestamps } => {
            init_pool(common.jobs)?;
            crate::train::run(&Context::new(common.options(timestamps))?).map(|_| ())
        }
        Command::Explain(c) => {
            init_pool(c.jobs)?;
            crate::explain::run(&Context::new(c.options(false))?).map(|_| ())
        }
        Command::Bench(c) => {
            init_pool(c.jobs)?;
            crate::bench::run(&Context::new(c.options(false))?).map(|_| ())
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("milx: {e}");
            e.exit_code()
        }
    }
}
