// SPDX-License-Identifier: Apache-2.0

use std::net::{SocketAddr, TcpListener};
use std::thread;

use log::{info, warn};

use super::{BarrierClient, Coordinator, FaultPlan, GangVerdict, WorkerContext};
use crate::error::{Error, Result};
use crate::meter::MemoryMeter;
use crate::transport::{AbortReason, HostMap, Timeouts};

/// How to launch an in-process gang.
#[derive(Clone, Debug)]
pub struct GangConfig {
    pub p: usize,
    pub max_restarts: u32,
    pub timeouts: Timeouts,
    /// Worker `r` listens on `port_base + r`; ephemeral ports when `None`.
    pub port_base: Option<u16>,
    pub fault: Option<FaultPlan>,
}

impl GangConfig {
    pub fn new(p: usize) -> Self {
        GangConfig {
            p,
            max_restarts: 3,
            timeouts: Timeouts::default(),
            port_base: None,
            fault: None,
        }
    }
}

/// Everything one worker needs for one attempt.
#[derive(Debug)]
pub struct WorkerSession {
    pub ctx: WorkerContext,
    pub listener: TcpListener,
    pub barrier: BarrierClient,
    /// Live tile bytes owned by this worker.
    pub data_meter: MemoryMeter,
    /// Transport buffer bytes owned by this worker's channels.
    pub buffer_meter: MemoryMeter,
}

impl WorkerSession {
    /// Joins the coordinator named in `ctx`, serving peers on `listener`.
    pub fn open(ctx: WorkerContext, listener: TcpListener) -> Result<Self> {
        let barrier = BarrierClient::connect(&ctx)?;
        Ok(WorkerSession {
            ctx,
            listener,
            barrier,
            data_meter: MemoryMeter::new(),
            buffer_meter: MemoryMeter::new(),
        })
    }

    pub fn rank(&self) -> usize {
        self.ctx.partition_id
    }

    /// Reports a failed stage to the coordinator so the whole gang aborts.
    pub fn fail(&mut self, err: &Error) {
        if let Error::Barrier(_) = err {
            // the gang already knows
            return;
        }
        self.barrier.report_failure(AbortReason::for_error(err));
    }
}

#[derive(Debug)]
pub struct GangRun<R> {
    /// One result per rank, in rank order.
    pub results: Vec<R>,
    /// Index of the attempt that succeeded.
    pub attempt: u32,
    /// Why each earlier attempt failed.
    pub failures: Vec<String>,
}

fn bind_listeners(cfg: &GangConfig) -> Result<(Vec<TcpListener>, HostMap)> {
    let mut listeners = Vec::with_capacity(cfg.p);
    for r in 0..cfg.p {
        let addr = match cfg.port_base {
            Some(base) => {
                let port = base as usize + 1 + r;
                if port > u16::MAX as usize {
                    return Err(Error::Config(format!(
                        "port base {base} too high for {} workers",
                        cfg.p
                    )));
                }
                format!("127.0.0.1:{port}")
            }
            None => "127.0.0.1:0".to_string(),
        };
        let l = TcpListener::bind(&addr)
            .map_err(|e| Error::Setup(format!("rank {r} cannot listen on {addr}: {e}")))?;
        listeners.push(l);
    }
    let addrs: Vec<SocketAddr> = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<std::io::Result<_>>()?;
    Ok((listeners, HostMap::from_socket_addrs(&addrs)?))
}

/// Runs `stage` on `cfg.p` worker threads as one gang.
///
/// Workers start each attempt together. If any worker fails or the
/// coordinator aborts, every worker of that attempt is abandoned and the
/// gang restarts from scratch with the next attempt number, up to
/// `cfg.max_restarts` times. Errors a restart cannot fix, such as a bad
/// configuration, are returned at once.
pub fn run_gang<R, F>(cfg: &GangConfig, stage: F) -> Result<GangRun<R>>
where
    R: Send,
    F: Fn(&mut WorkerSession) -> Result<R> + Sync,
{
    if cfg.p == 0 {
        return Err(Error::Config("a gang needs at least one worker".into()));
    }
    let mut failures = Vec::new();
    for attempt in 0..=cfg.max_restarts {
        let (listeners, hosts) = bind_listeners(cfg)?;
        let coordinator = if cfg.p > 1 {
            Some(Coordinator::bind(
                &cfg.port_base
                    .map_or("127.0.0.1:0".to_string(), |b| format!("127.0.0.1:{b}")),
                cfg.p,
                attempt,
                cfg.timeouts,
            )?)
        } else {
            None
        };
        let coord_addr = coordinator.as_ref().map(Coordinator::addr);
        let cancel = coordinator
            .as_ref()
            .map(Coordinator::cancel_token)
            .unwrap_or_default();

        let outcomes: Vec<Result<R>> = thread::scope(|s| {
            let handles: Vec<_> = listeners
                .into_iter()
                .enumerate()
                .map(|(rank, listener)| {
                    let ctx = WorkerContext::new(rank, hosts.clone(), attempt, coord_addr).map(|c| {
                        c.with_timeouts(cfg.timeouts)
                            .with_fault(cfg.fault)
                            .with_cancel(cancel.clone())
                    });
                    let stage = &stage;
                    thread::Builder::new()
                        .name(format!("worker-{rank}"))
                        .spawn_scoped(s, move || {
                            let mut session = WorkerSession::open(ctx?, listener)?;
                            let out = stage(&mut session);
                            if let Err(e) = &out {
                                session.fail(e);
                            }
                            out
                        })
                        .expect("spawning worker thread")
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Launch("worker thread panicked".into())))
                })
                .collect()
        });

        let verdict = coordinator.map(Coordinator::wait);
        if let Some(i) = outcomes
            .iter()
            .position(|o| o.as_ref().is_err_and(|e| !e.is_fatal_to_gang()))
        {
            // a deterministic error; restarting cannot help
            return Err(outcomes
                .into_iter()
                .nth(i)
                .and_then(Result::err)
                .expect("checked"));
        }
        let first_err = outcomes.iter().position(Result::is_err);
        match (first_err, verdict) {
            (None, None | Some(GangVerdict::Completed { .. })) => {
                if attempt > 0 {
                    info!("gang succeeded on attempt {attempt}");
                }
                return Ok(GangRun {
                    results: outcomes.into_iter().collect::<Result<_>>()?,
                    attempt,
                    failures,
                });
            }
            (err, verdict) => {
                let cause = match (verdict, err) {
                    (Some(GangVerdict::Failed(o)), _) => o.to_string(),
                    (_, Some(i)) => format!("rank {i}: {}", outcomes[i].as_ref().err().expect("checked")),
                    _ => "unknown".to_string(),
                };
                warn!("gang attempt {attempt} failed: {cause}");
                failures.push(cause);
            }
        }
    }
    Err(Error::GangFailed {
        attempts: cfg.max_restarts + 1,
        cause: failures.last().cloned().unwrap_or_default(),
    })
}
