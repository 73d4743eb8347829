// SPDX-License-Identifier: Apache-2.0

//! Gang execution: every worker of a stage starts together, meets at
//! barriers, and the whole gang is restarted when any one worker fails.
//!
//! A coordinator (run by the driver) implements arrive/release over the
//! same wire format the workers use between themselves. Control tags carry
//! the attempt and the barrier epoch so frames from an aborted attempt are
//! never mistaken for current ones.

mod client;
mod coordinator;
mod gang;

use std::fmt;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use client::BarrierClient;
pub use coordinator::{Coordinator, GangVerdict};
pub use gang::{run_gang, GangConfig, GangRun, WorkerSession};

use crate::error::{Error, Result};
use crate::transport::{AbortReason, HostMap, Timeouts};

/// What every waiter at one barrier instance observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BarrierOutcome {
    Released,
    /// `rank` is the worker whose failure caused the abort, when known.
    Aborted {
        rank: Option<usize>,
        reason: AbortReason,
    },
    TimedOut,
}

impl fmt::Display for BarrierOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BarrierOutcome::Released => f.write_str("released"),
            BarrierOutcome::Aborted {
                rank: Some(r),
                reason,
            } => write!(f, "aborted by rank {r} ({reason})"),
            BarrierOutcome::Aborted { rank: None, reason } => write!(f, "aborted ({reason})"),
            BarrierOutcome::TimedOut => f.write_str("timed out"),
        }
    }
}

/// Shared flag raised when the current attempt has been abandoned.
#[derive(Clone, Debug, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Where an injected fault fires inside a Cannon or baseline run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultPoint {
    /// After the mesh is up, before the first barrier.
    BeforeBarrier,
    /// After the initial alignment shifts, with peers mid-algorithm.
    MidRun,
}

/// Test hook: make one rank fail at a given point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub rank: usize,
    /// `None` fails on every attempt.
    pub attempt: Option<u32>,
    pub point: FaultPoint,
}

impl FaultPlan {
    pub fn fires(&self, rank: usize, attempt: u32, point: FaultPoint) -> bool {
        self.rank == rank && self.point == point && self.attempt.is_none_or(|a| a == attempt)
    }

    /// Parses `rank[:attempt][@mid]`, e.g. `2:0` or `1@mid`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad fault spec `{s}` (want rank[:attempt][@mid])"));
        let (body, point) = match s.split_once('@') {
            Some((b, "mid")) => (b, FaultPoint::MidRun),
            Some((b, "barrier")) => (b, FaultPoint::BeforeBarrier),
            Some(_) => return Err(bad()),
            None => (s, FaultPoint::BeforeBarrier),
        };
        let (rank, attempt) = match body.split_once(':') {
            Some((r, a)) => (r, Some(a.parse().map_err(|_| bad())?)),
            None => (body, None),
        };
        Ok(FaultPlan {
            rank: rank.parse().map_err(|_| bad())?,
            attempt,
            point,
        })
    }
}

/// A worker's identity for one attempt. Immutable for that attempt.
#[derive(Clone, Debug)]
pub struct WorkerContext {
    pub partition_id: usize,
    pub num_partitions: usize,
    pub host_map: HostMap,
    pub attempt: u32,
    /// Absent only for a gang of one.
    pub coordinator: Option<SocketAddr>,
    pub timeouts: Timeouts,
    pub fault: Option<FaultPlan>,
    pub cancel: CancelToken,
}

impl WorkerContext {
    pub fn new(
        partition_id: usize,
        host_map: HostMap,
        attempt: u32,
        coordinator: Option<SocketAddr>,
    ) -> Result<Self> {
        let num_partitions = host_map.len();
        if partition_id >= num_partitions {
            return Err(Error::Config(format!(
                "partition id {partition_id} out of range for {num_partitions} partitions"
            )));
        }
        if num_partitions > 1 && coordinator.is_none() {
            return Err(Error::Config(
                "a gang of more than one worker needs a coordinator".into(),
            ));
        }
        Ok(WorkerContext {
            partition_id,
            num_partitions,
            host_map,
            attempt,
            coordinator,
            timeouts: Timeouts::default(),
            fault: None,
            cancel: CancelToken::new(),
        })
    }

    pub fn with_timeouts(mut self, timeouts: Timeouts) -> Self {
        self.timeouts = timeouts;
        self
    }

    pub fn with_fault(mut self, fault: Option<FaultPlan>) -> Self {
        self.fault = fault;
        self
    }

    pub fn with_cancel(mut self, cancel: CancelToken) -> Self {
        self.cancel = cancel;
        self
    }

    /// Returns the injected error if the configured fault fires here.
    pub fn check_fault(&self, point: FaultPoint) -> Result<()> {
        match self.fault {
            Some(f) if f.fires(self.partition_id, self.attempt, point) => Err(Error::Injected {
                rank: self.partition_id,
                attempt: self.attempt,
            }),
            _ => Ok(()),
        }
    }
}
