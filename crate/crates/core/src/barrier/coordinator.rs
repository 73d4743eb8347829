// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::{BarrierOutcome, CancelToken};
use crate::error::{Error, Result};
use crate::transport::{AbortReason, ControlKind, FrameHeader, Tag, Timeouts};

/// How a gang attempt ended, as seen by the coordinator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GangVerdict {
    /// Every worker joined, passed its barriers and disconnected cleanly.
    Completed {
        barriers: u32,
    },
    Failed(BarrierOutcome),
}

/// Barrier coordinator for one attempt of a gang of `p` workers.
#[derive(Debug)]
pub struct Coordinator {
    addr: SocketAddr,
    cancel: CancelToken,
    handle: JoinHandle<GangVerdict>,
}

impl Coordinator {
    /// Starts a coordinator on an ephemeral loopback port.
    pub fn start(p: usize, attempt: u32, timeouts: Timeouts) -> Result<Self> {
        Self::bind("127.0.0.1:0", p, attempt, timeouts)
    }

    pub fn bind(addr: &str, p: usize, attempt: u32, timeouts: Timeouts) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config("a gang needs at least one worker".into()));
        }
        let listener = TcpListener::bind(addr)
            .map_err(|e| Error::Setup(format!("coordinator cannot bind {addr}: {e}")))?;
        let addr = listener.local_addr()?;
        let cancel = CancelToken::new();
        let token = cancel.clone();
        let handle = thread::Builder::new()
            .name(format!("coordinator-{attempt}"))
            .spawn(move || {
                let verdict = State::new(p, attempt, timeouts, token.clone()).run(listener);
                if matches!(verdict, GangVerdict::Failed(_)) {
                    token.cancel();
                }
                verdict
            })?;
        Ok(Coordinator { addr, cancel, handle })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Raised as soon as the attempt is known to have failed.
    pub fn cancel_token(&self) -> CancelToken {
        self.cancel.clone()
    }

    /// Abandons the attempt from outside; waiting workers are aborted.
    pub fn abort(&self) {
        self.cancel.cancel();
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    pub fn wait(self) -> GangVerdict {
        self.handle
            .join()
            .unwrap_or(GangVerdict::Failed(BarrierOutcome::Aborted {
                rank: None,
                reason: AbortReason::Unspecified,
            }))
    }
}

const ABANDONED: BarrierOutcome = BarrierOutcome::Aborted {
    rank: None,
    reason: AbortReason::Unspecified,
};

enum Event {
    Frame(usize, FrameHeader),
    Closed(usize),
}

struct State {
    p: usize,
    attempt: u32,
    timeouts: Timeouts,
    cancel: CancelToken,
    writers: Vec<Option<TcpStream>>,
    closed: Vec<bool>,
    /// epoch -> which ranks have arrived
    pending: BTreeMap<u32, Vec<bool>>,
    waiting_since: Option<Instant>,
    released: u32,
    highest_released: Option<u32>,
}

impl State {
    fn new(p: usize, attempt: u32, timeouts: Timeouts, cancel: CancelToken) -> Self {
        State {
            p,
            attempt,
            timeouts,
            cancel,
            writers: (0..p).map(|_| None).collect(),
            closed: vec![false; p],
            pending: BTreeMap::new(),
            waiting_since: None,
            released: 0,
            highest_released: None,
        }
    }

    fn run(mut self, listener: TcpListener) -> GangVerdict {
        let (events, inbox) = mpsc::channel();
        if let Err(outcome) = self.join_all(&listener, &events) {
            return self.fail(outcome, 0);
        }
        drop(events);
        loop {
            let tick = Duration::from_millis(20);
            match inbox.recv_timeout(tick) {
                Ok(Event::Frame(rank, h)) => {
                    if let Err((outcome, epoch)) = self.on_frame(rank, h) {
                        return self.fail(outcome, epoch);
                    }
                }
                Ok(Event::Closed(rank)) => {
                    self.closed[rank] = true;
                    if let Some(&epoch) = self.blocked_on(rank) {
                        return self.fail(
                            BarrierOutcome::Aborted {
                                rank: Some(rank),
                                reason: AbortReason::Disconnect,
                            },
                            epoch,
                        );
                    }
                    if self.closed.iter().all(|&c| c) {
                        return GangVerdict::Completed {
                            barriers: self.released,
                        };
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return GangVerdict::Completed {
                        barriers: self.released,
                    };
                }
            }
            if self.cancel.is_cancelled() {
                let epoch = self.pending.keys().next().copied().unwrap_or(0);
                return self.fail(ABANDONED, epoch);
            }
            if let Some(since) = self.waiting_since {
                if since.elapsed() > self.timeouts.barrier {
                    let epoch = self.pending.keys().next().copied().unwrap_or(0);
                    return self.fail(BarrierOutcome::TimedOut, epoch);
                }
            }
        }
    }

    fn join_all(
        &mut self,
        listener: &TcpListener,
        events: &mpsc::Sender<Event>,
    ) -> std::result::Result<(), BarrierOutcome> {
        let deadline = Instant::now() + self.timeouts.connect;
        listener
            .set_nonblocking(true)
            .map_err(|_| BarrierOutcome::TimedOut)?;
        let mut joined = 0;
        while joined < self.p {
            let stream = match listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if self.cancel.is_cancelled() {
                        return Err(ABANDONED);
                    }
                    if Instant::now() >= deadline {
                        warn!("coordinator: only {joined}/{} workers joined", self.p);
                        return Err(BarrierOutcome::TimedOut);
                    }
                    thread::sleep(Duration::from_millis(2));
                    continue;
                }
                Err(_) => continue,
            };
            let _ = stream.set_nonblocking(false);
            let _ = stream.set_nodelay(true);
            let _ = stream.set_read_timeout(Some(
                deadline
                    .saturating_duration_since(Instant::now())
                    .max(Duration::from_millis(1)),
            ));
            let mut r = &stream;
            let hello = match FrameHeader::read_from(&mut r) {
                Ok(h) => h,
                Err(e) => {
                    debug!("coordinator: bad join: {e}");
                    continue;
                }
            };
            let rank = hello.source_rank as usize;
            let ok = matches!(hello.tag.as_control(),
                Some(c) if c.kind == ControlKind::Join && c.attempt == self.attempt & 0xFF)
                && rank < self.p
                && self.writers[rank].is_none();
            if !ok {
                // stale attempt or impostor: refuse it, keep waiting
                debug!("coordinator: rejected join {:?} from rank {rank}", hello.tag);
                let _ = stream.shutdown(Shutdown::Both);
                continue;
            }
            let _ = stream.set_read_timeout(None);
            let reader = match stream.try_clone() {
                Ok(s) => s,
                Err(_) => return Err(BarrierOutcome::TimedOut),
            };
            self.writers[rank] = Some(stream);
            let tx = events.clone();
            thread::spawn(move || {
                let mut reader = reader;
                loop {
                    match FrameHeader::read_or_eof(&mut reader) {
                        Ok(Some(h)) if h.payload_length == 0 => {
                            if tx.send(Event::Frame(rank, h)).is_err() {
                                break;
                            }
                        }
                        _ => {
                            let _ = tx.send(Event::Closed(rank));
                            break;
                        }
                    }
                }
            });
            joined += 1;
        }
        Ok(())
    }

    /// An epoch some other rank is waiting at that `rank` has not reached.
    fn blocked_on(&self, rank: usize) -> Option<&u32> {
        self.pending
            .iter()
            .find(|(_, arrived)| !arrived[rank])
            .map(|(e, _)| e)
    }

    fn on_frame(&mut self, rank: usize, h: FrameHeader) -> std::result::Result<(), (BarrierOutcome, u32)> {
        let protocol = |epoch| {
            (
                BarrierOutcome::Aborted {
                    rank: Some(rank),
                    reason: AbortReason::Protocol,
                },
                epoch,
            )
        };
        let Some(ctl) = h.tag.as_control() else {
            return Err(protocol(0));
        };
        if ctl.attempt != self.attempt & 0xFF || h.source_rank as usize != rank {
            return Err(protocol(ctl.epoch));
        }
        match ctl.kind {
            ControlKind::Arrive => {
                let epoch = ctl.epoch;
                if self.highest_released.is_some_and(|hr| epoch <= hr) {
                    // second arrival at an already released epoch
                    return Err(protocol(epoch));
                }
                let p = self.p;
                let arrived = self.pending.entry(epoch).or_insert_with(|| vec![false; p]);
                if arrived[rank] {
                    return Err(protocol(epoch));
                }
                arrived[rank] = true;
                if self.waiting_since.is_none() {
                    self.waiting_since = Some(Instant::now());
                }
                if let Some(closed) = (0..p).find(|&r| self.closed[r] && !self.pending[&epoch][r]) {
                    return Err((
                        BarrierOutcome::Aborted {
                            rank: Some(closed),
                            reason: AbortReason::Disconnect,
                        },
                        epoch,
                    ));
                }
                if self.pending[&epoch].iter().all(|&a| a) {
                    self.pending.remove(&epoch);
                    self.release(epoch);
                }
                Ok(())
            }
            ControlKind::Abort => Err((
                BarrierOutcome::Aborted {
                    rank: Some(rank),
                    reason: ctl.reason,
                },
                ctl.epoch,
            )),
            ControlKind::Release | ControlKind::Join => Err(protocol(ctl.epoch)),
        }
    }

    fn release(&mut self, epoch: u32) {
        let tag = Tag::control(
            ControlKind::Release,
            self.attempt,
            epoch,
            AbortReason::Unspecified,
        );
        self.broadcast(tag, u32::MAX);
        self.released += 1;
        self.highest_released = Some(self.highest_released.map_or(epoch, |h| h.max(epoch)));
        self.waiting_since = if self.pending.is_empty() {
            None
        } else {
            Some(Instant::now())
        };
    }

    fn broadcast(&mut self, tag: Tag, source: u32) {
        let frame = FrameHeader {
            tag,
            source_rank: source,
            payload_length: 0,
        }
        .encode();
        for w in self.writers.iter_mut().flatten() {
            let _ = w.write_all(&frame);
        }
    }

    fn fail(mut self, outcome: BarrierOutcome, epoch: u32) -> GangVerdict {
        warn!("coordinator: attempt {} {outcome}", self.attempt);
        let (rank, reason) = match outcome {
            BarrierOutcome::Aborted { rank, reason } => (rank, reason),
            _ => (None, AbortReason::Timeout),
        };
        let tag = Tag::control(ControlKind::Abort, self.attempt, epoch, reason);
        self.broadcast(tag, rank.map_or(u32::MAX, |r| r as u32));
        for w in self.writers.iter().flatten() {
            let _ = w.shutdown(Shutdown::Write);
        }
        GangVerdict::Failed(outcome)
    }
}
