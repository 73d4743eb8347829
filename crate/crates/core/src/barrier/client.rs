// SPDX-License-Identifier: Apache-2.0

use std::io::{self, Write};
use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use super::{BarrierOutcome, WorkerContext};
use crate::error::{Error, Result};
use crate::transport::wire::read_raw_header;
use crate::transport::{AbortReason, ControlKind, FrameHeader, Tag, Timeouts};

/// Slack on top of the coordinator's barrier timeout before a worker gives
/// up on hearing back.
const CLIENT_GRACE: Duration = Duration::from_secs(5);

/// A worker's connection to the gang coordinator.
#[derive(Debug)]
pub struct BarrierClient {
    rank: usize,
    attempt: u32,
    conn: Option<TcpStream>,
    timeouts: Timeouts,
    next_epoch: u32,
    failed: Option<BarrierOutcome>,
}

impl BarrierClient {
    /// Joins the coordinator named in `ctx`. A gang of one needs none.
    pub fn connect(ctx: &WorkerContext) -> Result<Self> {
        let conn = match ctx.coordinator {
            None if ctx.num_partitions == 1 => None,
            None => {
                return Err(Error::Config(
                    "no coordinator address for a multi-worker gang".into(),
                ))
            }
            Some(addr) => {
                let deadline = Instant::now() + ctx.timeouts.connect;
                let stream = loop {
                    match TcpStream::connect_timeout(&addr, Duration::from_secs(1)) {
                        Ok(s) => break s,
                        Err(e) if Instant::now() >= deadline => {
                            return Err(Error::Setup(format!(
                                "rank {}: cannot reach coordinator at {addr}: {e}",
                                ctx.partition_id
                            )))
                        }
                        Err(_) => thread::sleep(Duration::from_millis(10)),
                    }
                };
                stream.set_nodelay(true)?;
                let mut s = stream;
                FrameHeader {
                    tag: Tag::control(ControlKind::Join, ctx.attempt, 0, AbortReason::Unspecified),
                    source_rank: ctx.partition_id as u32,
                    payload_length: 0,
                }
                .write_to(&mut s)
                .map_err(|e| Error::transport("joining coordinator", e))?;
                Some(s)
            }
        };
        Ok(BarrierClient {
            rank: ctx.partition_id,
            attempt: ctx.attempt,
            conn,
            timeouts: ctx.timeouts,
            next_epoch: 0,
            failed: None,
        })
    }

    /// Epoch the next [`barrier_next`](Self::barrier_next) call will use.
    pub fn next_epoch(&self) -> u32 {
        self.next_epoch
    }

    fn send(&mut self, kind: ControlKind, epoch: u32, reason: AbortReason) -> io::Result<()> {
        let Some(conn) = self.conn.as_mut() else {
            return Ok(());
        };
        let frame = FrameHeader {
            tag: Tag::control(kind, self.attempt, epoch, reason),
            source_rank: self.rank as u32,
            payload_length: 0,
        };
        conn.write_all(&frame.encode())
    }

    /// Blocks until every worker of the gang has arrived at `epoch`, or the
    /// attempt is aborted or times out. Epochs must increase strictly.
    pub fn barrier(&mut self, epoch: u32) -> Result<BarrierOutcome> {
        if let Some(outcome) = self.failed {
            return Ok(outcome);
        }
        if epoch < self.next_epoch {
            return Err(Error::Protocol(format!(
                "rank {} arrived at epoch {epoch} twice (next is {})",
                self.rank, self.next_epoch
            )));
        }
        self.next_epoch = epoch + 1;
        if self.conn.is_none() {
            return Ok(BarrierOutcome::Released);
        }
        if self
            .send(ControlKind::Arrive, epoch, AbortReason::Unspecified)
            .is_err()
        {
            return Ok(self.settle(BarrierOutcome::Aborted {
                rank: None,
                reason: AbortReason::Disconnect,
            }));
        }
        let wait = self.timeouts.barrier + CLIENT_GRACE;
        let conn = self.conn.as_mut().expect("checked above");
        conn.set_read_timeout(Some(wait))?;
        let outcome = await_verdict(conn, epoch);
        Ok(self.settle(outcome))
    }

    /// Barrier at the next epoch; anything but a release becomes an error.
    pub fn barrier_next(&mut self) -> Result<()> {
        match self.barrier(self.next_epoch)? {
            BarrierOutcome::Released => Ok(()),
            other => Err(Error::Barrier(other)),
        }
    }

    fn settle(&mut self, outcome: BarrierOutcome) -> BarrierOutcome {
        if outcome != BarrierOutcome::Released {
            self.failed = Some(outcome);
        }
        outcome
    }

    /// Tells the coordinator this worker failed; the gang is aborted.
    pub fn report_failure(&mut self, reason: AbortReason) {
        if self.failed.is_some() {
            return;
        }
        let epoch = self.next_epoch;
        let _ = self.send(ControlKind::Abort, epoch, reason);
        self.failed = Some(BarrierOutcome::Aborted {
            rank: Some(self.rank),
            reason,
        });
    }

    /// Sends a raw arrival without waiting, bypassing the local epoch check.
    #[doc(hidden)]
    pub fn send_raw_arrival(&mut self, epoch: u32) -> Result<()> {
        self.send(ControlKind::Arrive, epoch, AbortReason::Unspecified)
            .map_err(|e| Error::transport("sending arrival", e))
    }
}

/// Reads the coordinator's answer to an arrival at `epoch`.
fn await_verdict(conn: &mut TcpStream, epoch: u32) -> BarrierOutcome {
    let disconnect = BarrierOutcome::Aborted {
        rank: None,
        reason: AbortReason::Disconnect,
    };
    let header = match read_raw_header(conn) {
        Ok(Some(raw)) => FrameHeader::decode(&raw).ok(),
        Ok(None) => return disconnect,
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            return BarrierOutcome::TimedOut
        }
        Err(_) => return disconnect,
    };
    match header.and_then(|h| h.tag.as_control().map(|c| (h, c))) {
        Some((_, c)) if c.kind == ControlKind::Release && c.epoch == epoch & 0xFFF => {
            BarrierOutcome::Released
        }
        Some((_, c)) if c.kind == ControlKind::Abort && c.reason == AbortReason::Timeout => {
            BarrierOutcome::TimedOut
        }
        Some((h, c)) if c.kind == ControlKind::Abort => BarrierOutcome::Aborted {
            rank: (h.source_rank != u32::MAX).then_some(h.source_rank as usize),
            reason: c.reason,
        },
        _ => BarrierOutcome::Aborted {
            rank: None,
            reason: AbortReason::Protocol,
        },
    }
}
