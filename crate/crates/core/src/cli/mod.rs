// SPDX-License-Identifier: Apache-2.0

//! Command-line interface.
//!
//! Exit codes: 0 success, 1 report or I/O failure, 2 configuration error,
//! 3 gang failure, 4 verification mismatch.

mod commands;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::driver::{Implementation, LaunchMode};
use crate::error::Error;
use crate::scalar::ElementType;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_GANG: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

/// Loopback port base when `CANNON_PORT_BASE` is unset. `0` there selects
/// ephemeral ports.
pub const DEFAULT_PORT_BASE: u16 = 47000;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::GridIncompatible { .. } | Error::HostMap { .. } | Error::Contract(_) => {
            EXIT_CONFIG
        }
        Error::GangFailed { .. }
        | Error::Barrier(_)
        | Error::Setup(_)
        | Error::Transport(_)
        | Error::Protocol(_)
        | Error::Injected { .. }
        | Error::Launch(_) => EXIT_GANG,
        Error::Mismatch(_) => EXIT_MISMATCH,
        Error::Analysis(_) | Error::Report(_) | Error::Io(_) => EXIT_OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cannon",
    version,
    about = "Distributed matrix multiplication on a TCP torus"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiply two seeded random matrices and write a report.
    Run(RunArgs),
    /// Check distributed products against the sequential oracle.
    Verify(VerifyArgs),
    /// Sweep sizes and grids for both implementations.
    Bench(BenchArgs),
    /// Compare saved reports with the scaling model.
    Analyze(AnalyzeArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F64,
    F32,
    I32,
}

impl From<DtypeArg> for ElementType {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F64 => ElementType::F64,
            DtypeArg::F32 => ElementType::F32,
            DtypeArg::I32 => ElementType::I32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Threads,
    Processes,
}

impl From<ModeArg> for LaunchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Threads => LaunchMode::Threads,
            ModeArg::Processes => LaunchMode::Processes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ImplArg {
    Cannon,
    Baseline,
}

impl From<ImplArg> for Implementation {
    fn from(i: ImplArg) -> Self {
        match i {
            ImplArg::Cannon => Implementation::Cannon,
            ImplArg::Baseline => Implementation::Baseline,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchImpl {
    Cannon,
    Baseline,
    Both,
}

/// Options shared by every command that launches a gang.
#[derive(Clone, Debug, Args)]
pub struct GangArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Worker address file, one `rank host:port` per line. Implies processes mode.
    #[arg(long, value_name = "FILE")]
    pub hosts: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub max_restarts: u32,
    #[arg(long, default_value_t = 30, value_name = "SECS")]
    pub connect_timeout: u64,
    #[arg(long, default_value_t = 60, value_name = "SECS")]
    pub barrier_timeout: u64,
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub n: usize,
    /// Grid side q; the gang has q*q workers.
    #[arg(long = "grid", value_name = "Q")]
    pub q: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long = "impl", value_enum, default_value = "cannon")]
    pub implementation: ImplArg,
    #[arg(long, value_name = "DIR", default_value = "reports")]
    pub out: PathBuf,
    /// Compare the product with the sequential oracle; mismatch exits 4.
    #[arg(long)]
    pub verify: bool,
    /// Zero-pad n up to a multiple of q instead of rejecting it.
    #[arg(long)]
    pub pad: bool,
    #[command(flatten)]
    pub gang: GangArgs,
    #[arg(long, hide = true, value_name = "RANK[:ATTEMPT][@mid]")]
    pub inject_fault: Option<String>,
    #[arg(long, hide = true, default_value_t = 0)]
    pub scatter_delay_ms: u64,
}

#[derive(Clone, Debug, Args)]
pub struct VerifyArgs {
    /// Check only this order (every q in 1..=4 dividing it, or --grid).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "grid", value_name = "Q")]
    pub q: Option<usize>,
    /// Element types to check; float64 and int32 by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub dtype: Vec<DtypeArg>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub gang: GangArgs,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![64usize, 128, 256])]
    pub sizes: Vec<usize>,
    #[arg(long = "grids", value_delimiter = ',', default_values_t = vec![1usize, 2, 4])]
    pub grids: Vec<usize>,
    #[arg(long = "impl", value_enum, default_value = "both")]
    pub implementation: BenchImpl,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Also sweep the grids at this fixed tile side for the memory table.
    #[arg(long, value_name = "SIDE")]
    pub tile: Option<usize>,
    #[arg(long, value_name = "DIR", default_value = "reports")]
    pub out: PathBuf,
    #[command(flatten)]
    pub gang: GangArgs,
}

#[derive(Clone, Debug, Args)]
pub struct AnalyzeArgs {
    /// Report JSON files, each one report or an array of reports.
    pub reports: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print the model quantities for this matrix order.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub p: u64,
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
}

#[derive(Clone, Debug, Args)]
pub struct WorkerArgs {
    #[arg(long)]
    pub rank: usize,
    #[arg(long = "grid")]
    pub q: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub pad: bool,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: ElementType,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub reps: usize,
    #[arg(long = "impl", value_enum)]
    pub implementation: ImplArg,
    #[arg(long)]
    pub hosts: PathBuf,
    #[arg(long)]
    pub coordinator: Option<SocketAddr>,
    #[arg(long)]
    pub attempt: u32,
    #[arg(long)]
    pub block_out: PathBuf,
    #[arg(long)]
    pub fault: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub scatter_delay_ms: u64,
    #[arg(long)]
    pub connect_timeout_ms: u64,
    #[arg(long)]
    pub io_timeout_ms: u64,
    #[arg(long)]
    pub barrier_timeout_ms: u64,
}

fn parse_dtype(s: &str) -> Result<ElementType, String> {
    s.parse::<ElementType>().map_err(|e| e.to_string())
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Worker(a) => commands::worker(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::GridIncompatible { n: 64, q: 3 }), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::GangFailed {
                attempts: 4,
                cause: String::new()
            }),
            EXIT_GANG
        );
        assert_eq!(exit_code(&Error::Mismatch(String::new())), EXIT_MISMATCH);
    }

    #[test]
    fn unknown_flag_is_config_error() {
        assert_eq!(main_with_args(["cannon", "run", "--bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
