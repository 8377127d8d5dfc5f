//! Command-line front end for `tapamp`.
//!
//! Four subcommands: `simulate` runs a disorder ensemble, `phase` sweeps the
//! limit quantities over a `(β, h)` grid, `scaling` fits error-functional
//! slopes against `N`, and `verify` runs the acceptance suite.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 resource guard.

pub mod commands;
pub mod config;
pub mod criteria;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use tapamp::ensemble::{Fault, ScalingQuantity};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GUARD: i32 = 3;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "TAPAMP_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Guard(String),
    /// Identifiers of the failed criteria.
    Verify(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Guard(_) => EXIT_GUARD,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Guard(m) => f.write_str(m),
            CliError::Verify(ids) => write!(f, "failed criteria: {}", ids.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tapamp::Error> for CliError {
    fn from(e: tapamp::Error) -> Self {
        match e {
            tapamp::Error::ResourceGuard(_) => CliError::Guard(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tapamp", version, about = "TAP/AMP iterations for the SK model and their large-N limit")]
pub struct Cli {
    /// Worker threads; falls back to TAPAMP_THREADS, then to all cores.
    #[arg(long, global = true, value_name = "K")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a disorder ensemble and write the report and tables.
    Simulate(RunArgs),
    /// Tabulate q, q-tilde, the AT residual and chi(q) over a (beta, h) grid.
    Phase(RunArgs),
    /// Fit log-log slopes of the error functionals against N.
    Scaling(ScalingArgs),
    /// Run the acceptance suite and print a PASS/FAIL table.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Base disorder seed, replacing the one in the config.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
    /// Config override such as `params.beta=1.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, hide = true, value_name = "FAULT")]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Quantities to fit; repeatable.
    #[arg(long = "quantity", value_enum, default_values_t = [QuantityArg::Epsilon, QuantityArg::Delta])]
    pub quantities: Vec<QuantityArg>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Print the criterion identifiers without running them.
    #[arg(long)]
    pub list: bool,
    /// Run only these criteria; repeatable.
    #[arg(long = "only", value_name = "ID")]
    pub only: Vec<String>,
    #[arg(long, hide = true, value_name = "FAULT")]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    OnsagerSign,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::OnsagerSign => Fault::OnsagerSign,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuantityArg {
    Epsilon,
    Delta,
    ChoiceGap,
}

impl From<QuantityArg> for ScalingQuantity {
    fn from(q: QuantityArg) -> Self {
        match q {
            QuantityArg::Epsilon => ScalingQuantity::Epsilon,
            QuantityArg::Delta => ScalingQuantity::Delta,
            QuantityArg::ChoiceGap => ScalingQuantity::ChoiceGap,
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if threads == Some(0) {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(threads)
}

fn load_run_config(args: &RunArgs) -> Result<Value, CliError> {
    let mut value = config::load(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        value["seed"] = seed.into();
    }
    if let Some(fault) = args.inject_fault {
        value["inject_fault"] = serde_json::to_value(Fault::from(fault)).expect("fault serializes");
    }
    Ok(value)
}

fn emit(args: &RunArgs, files: commands::Files) -> Result<(), CliError> {
    for path in output::write_outputs(&args.out, &files, args.force)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<(), CliError> {
    if args.list {
        for c in &criteria::CRITERIA {
            println!("{}  {}", c.id, c.title);
        }
        return Ok(());
    }
    let selected: Vec<&criteria::Criterion> = if args.only.is_empty() {
        criteria::CRITERIA.iter().collect()
    } else {
        args.only
            .iter()
            .map(|id| criteria::find(id).ok_or_else(|| CliError::Usage(format!("unknown criterion `{id}`"))))
            .collect::<Result<_, _>>()?
    };
    let ctx = criteria::Context { fault: args.inject_fault.map(Fault::from) };
    let mut failed = Vec::new();
    for c in selected {
        let start = std::time::Instant::now();
        let out = c.run(&ctx);
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("{}  {:<36} {}  {:>7.1}s  {}", c.id, c.title, verdict, start.elapsed().as_secs_f64(), out.detail);
        if !out.pass {
            failed.push(c.id.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed))
    }
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(args) => emit(args, commands::simulate(load_run_config(args)?)?),
        Command::Phase(args) => emit(args, commands::phase(load_run_config(args)?)?),
        Command::Scaling(args) => {
            let quantities: Vec<ScalingQuantity> = args.quantities.iter().map(|&q| q.into()).collect();
            emit(&args.run, commands::scaling(load_run_config(&args.run)?, &quantities)?)
        }
        Command::Verify(args) => verify(args),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = resolve_threads(cli.threads).and_then(|threads| match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {t} threads: {e}")))?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("tapamp: {e}");
            e.exit_code()
        }
    }
}
