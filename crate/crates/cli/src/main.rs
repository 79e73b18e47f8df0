//! `attnlab`: accounting tables, the equivalence-check suite, a toy
//! attention walk-through, and MHA to MLA weight conversion.

mod account;
mod convert;
mod demo;
mod format;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attnlab_core::check::{run_checks, BreakMode, CheckOptions, DEFAULT_SIZES};
use attnlab_core::Error;

pub const DEFAULT_SEED: u64 = 20250101;

#[derive(Debug, Parser)]
#[command(name = "attnlab", version, about = "Desk-scale attention engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cache bytes, weight floats and decode FLOPs for a model preset.
    Account(AccountArgs),
    /// Run the seeded equivalence-property suite.
    Check(CheckArgs),
    /// Tokenize, embed and attend over a short text, printing every stage.
    Demo(DemoArgs),
    /// Factorize an MHA weight bundle into a merged MLA bundle.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("model").required(true).args(["preset", "config"]))]
pub struct AccountArgs {
    /// Built-in preset name.
    #[arg(long)]
    pub preset: Option<String>,
    /// Preset JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cached tokens per sequence.
    #[arg(long, default_value_t = 8192)]
    pub context: usize,
    /// Bits per stored float.
    #[arg(long, default_value_t = 16)]
    pub bits: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, env = "ATTNLAB_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Largest token count used by the sequence properties.
    #[arg(long, default_value_t = DEFAULT_SIZES)]
    pub sizes: usize,
    /// Inject a known fault to demonstrate a failing property.
    #[arg(long = "break", value_parser = parse_break)]
    pub break_mode: Option<BreakMode>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DemoKernel {
    ScaledExp,
    Linear,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value = "the quick brown fox jumps over the lazy dog")]
    pub text: String,
    /// Vocabulary JSON file (`tokens`, `dim`, and `rows` or `seed`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DemoKernel::ScaledExp)]
    pub kernel: DemoKernel,
    /// Restrict each token to itself and earlier tokens.
    #[arg(long)]
    pub causal: bool,
    #[arg(long, env = "ATTNLAB_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// MHA weight bundle to convert.
    pub input: PathBuf,
    /// Latent width `d_L` of the shared key/value factor.
    #[arg(long = "d-l")]
    pub d_l: usize,
    /// Latent width `d_LQ` of the query factor; defaults to `d_in`.
    #[arg(long = "d-lq")]
    pub d_lq: Option<usize>,
    /// Output path for the merged MLA bundle.
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
    #[arg(long, env = "ATTNLAB_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

fn parse_break(s: &str) -> Result<BreakMode, String> {
    BreakMode::parse(s).ok_or_else(|| {
        format!(
            "unknown break mode {s:?} (known: {})",
            BreakMode::MlaRope.name()
        )
    })
}

/// A command failure and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments: exit 2.
    Usage(String),
    /// Runtime error: exit 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Output of a successful command and whether it counts as passing.
pub struct Outcome {
    pub stdout: String,
    pub passed: bool,
}

fn check(args: &CheckArgs) -> Result<Outcome, Failure> {
    let opts = CheckOptions {
        seed: args.seed,
        sizes: args.sizes,
        break_mode: args.break_mode,
    };
    if opts.sizes == 0 {
        return Err(Failure::Usage("--sizes must be at least 1".into()));
    }
    let report = run_checks(&opts)?;
    let stdout = if args.json {
        format::to_json(&report)
    } else {
        report.render_text()
    };
    Ok(Outcome {
        stdout,
        passed: report.passed,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Account(a) => account::run(a),
        Command::Check(a) => check(a),
        Command::Demo(a) => demo::run(a),
        Command::Convert(a) => convert::run(a),
    };
    match result {
        Ok(out) => {
            print!("{}", out.stdout);
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
