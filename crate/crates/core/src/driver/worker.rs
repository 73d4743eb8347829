// SPDX-License-Identifier: Apache-2.0

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{allgather_product, Implementation};
use crate::barrier::WorkerSession;
use crate::cannon::{dot_product, CommCounters, DotOptions};
use crate::error::Result;
use crate::scalar::Element;
use crate::tile::DenseTile;
use crate::topology::TorusTopology;
use crate::transport::TransportStats;

/// What every worker does for one run.
#[derive(Clone, Debug)]
pub struct WorkerJob {
    pub implementation: Implementation,
    pub reps: usize,
    pub scatter_delay: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub rep: usize,
    /// Barrier-to-barrier time of the multiply.
    pub dot_ms: f64,
    pub peak_data_bytes: usize,
}

/// One worker's measurements over all repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerMetrics {
    pub rank: usize,
    pub row: usize,
    pub col: usize,
    pub reps: Vec<RepMetrics>,
    /// Largest tile bytes live at once, over all repetitions.
    pub peak_data_bytes: usize,
    /// Transport buffer bytes held while the mesh was up.
    pub buffer_bytes: usize,
    pub channels: usize,
    /// Counters of the last repetition.
    pub comm: CommCounters,
    pub transport: TransportStats,
    /// OS peak resident set of the worker process; processes mode only.
    pub peak_rss_bytes: Option<u64>,
    /// CPU time of the worker process; processes mode only.
    pub cpu_ms: Option<f64>,
}

/// Runs `job.reps` multiplies on fresh copies of this worker's blocks and
/// returns the last product block.
pub fn run_worker<T: Element>(
    session: &mut WorkerSession,
    job: &WorkerJob,
    inputs: impl Fn() -> (DenseTile<T>, DenseTile<T>),
) -> Result<(DenseTile<T>, WorkerMetrics)> {
    let topo = TorusTopology::for_partitions(session.ctx.num_partitions)?;
    let (row, col) = topo.coords_of(session.rank())?;
    let mut metrics = WorkerMetrics {
        rank: session.rank(),
        row,
        col,
        reps: Vec::with_capacity(job.reps),
        peak_data_bytes: 0,
        buffer_bytes: 0,
        channels: 0,
        comm: CommCounters::default(),
        transport: TransportStats::default(),
        peak_rss_bytes: None,
        cpu_ms: None,
    };
    let mut last = None;
    for rep in 0..job.reps {
        let (mut a, mut b) = inputs();
        if !job.scatter_delay.is_zero() {
            thread::sleep(job.scatter_delay);
        }
        let (c, stats) = match job.implementation {
            Implementation::Cannon => dot_product(session, &mut a, &mut b, DotOptions::default())?,
            Implementation::Baseline => allgather_product(session, &a, &b)?,
        };
        metrics.reps.push(RepMetrics {
            rep,
            dot_ms: stats.elapsed.as_secs_f64() * 1e3,
            peak_data_bytes: stats.peak_data_bytes,
        });
        metrics.peak_data_bytes = metrics.peak_data_bytes.max(stats.peak_data_bytes);
        metrics.buffer_bytes = metrics.buffer_bytes.max(stats.buffer_bytes);
        metrics.channels = stats.channels;
        metrics.comm = stats.comm;
        metrics.transport = stats.transport;
        last = Some(c);
    }
    let c = last.expect("reps validated to be at least 1");
    Ok((c, metrics))
}
