// SPDX-License-Identifier: Apache-2.0

use std::io;

use thiserror::Error;

use crate::barrier::BarrierOutcome;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, dtypes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("grid incompatibility: matrix order n={n} is not divisible by grid side q={q}")]
    GridIncompatible { n: usize, q: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("host map line {line}: {message}")]
    HostMap { line: usize, message: String },

    #[error("setup failure: {0}")]
    Setup(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("barrier did not release: {0}")]
    Barrier(BarrierOutcome),

    #[error("injected fault on rank {rank} (attempt {attempt})")]
    Injected { rank: usize, attempt: u32 },

    #[error("gang failed after {attempts} attempt(s): {cause}")]
    GangFailed { attempts: u32, cause: String },

    #[error("worker launch failure: {0}")]
    Launch(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("verification mismatch: {0}")]
    Mismatch(String),

    #[error("report I/O: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn transport(context: &str, err: io::Error) -> Self {
        Error::Transport(format!("{context}: {err}"))
    }

    /// Failures that must be reported to the gang coordinator as an abort.
    pub fn is_fatal_to_gang(&self) -> bool {
        matches!(
            self,
            Error::Setup(_)
                | Error::Transport(_)
                | Error::Protocol(_)
                | Error::Injected { .. }
                | Error::Io(_)
                | Error::Barrier(_)
        )
    }
}
