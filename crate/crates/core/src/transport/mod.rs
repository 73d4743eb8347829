// SPDX-License-Identifier: Apache-2.0

//! Point-to-point messaging between gang workers over TCP.
//!
//! Every connection owns two preallocated 8 MiB buffers. Payloads larger than
//! a buffer are streamed through it in chunks behind a single header.

mod channel;
mod hostmap;
pub mod wire;

use std::net::TcpListener;
use std::time::Duration;

pub use channel::{sendrecv, sendrecv_replace, PeerChannel, RecvHalf, SendHalf};
pub use hostmap::HostMap;
pub use wire::{
    AbortReason, ControlKind, ControlTag, FrameHeader, Plane, Tag, WireMessage, BUFFER_CAPACITY, HEADER_LEN,
    MAGIC,
};

use crate::barrier::CancelToken;
use crate::error::{Error, Result};
use crate::meter::MemoryMeter;
use crate::scalar::Element;
use crate::tile::DenseTile;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timeouts {
    /// Mesh and coordinator connection setup.
    pub connect: Duration,
    /// Any single blocking socket read or write.
    pub io: Duration,
    /// Waiting at a barrier for the rest of the gang.
    pub barrier: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            connect: Duration::from_secs(30),
            io: Duration::from_secs(30),
            barrier: Duration::from_secs(60),
        }
    }
}

/// Per-mesh transfer counters, indexed by [`Plane`].
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransportStats {
    pub transfers: [u64; 4],
    pub elements_sent: [u64; 4],
    pub bytes_sent: [u64; 4],
    /// Buffer bytes allocated when the mesh was built.
    pub buffer_bytes: usize,
    /// Buffer allocations; only ever made during mesh setup.
    pub buffer_allocations: u64,
}

impl TransportStats {
    pub fn plane(&self, plane: Plane) -> (u64, u64) {
        (self.transfers[plane as usize], self.elements_sent[plane as usize])
    }

    pub fn merge(&mut self, other: &TransportStats) {
        for i in 0..4 {
            self.transfers[i] += other.transfers[i];
            self.elements_sent[i] += other.elements_sent[i];
            self.bytes_sent[i] += other.bytes_sent[i];
        }
        self.buffer_bytes = self.buffer_bytes.max(other.buffer_bytes);
        self.buffer_allocations += other.buffer_allocations;
    }
}

/// Identity of the worker building a mesh.
#[derive(Clone, Debug)]
pub struct MeshSetup<'a> {
    pub rank: usize,
    pub attempt: u32,
    pub hosts: &'a HostMap,
    pub timeouts: Timeouts,
    pub cancel: Option<&'a CancelToken>,
}

/// All of one worker's channels, addressable by peer rank.
#[derive(Debug)]
pub struct Mesh {
    rank: usize,
    channels: Vec<Option<PeerChannel>>,
    stats: TransportStats,
}

/// Connects this worker to each of `neighbors`. The lower rank of every
/// pair dials, the higher rank accepts on `listener`, so each pair ends up
/// with exactly one connection.
pub fn establish_mesh(
    setup: &MeshSetup<'_>,
    listener: &TcpListener,
    neighbors: &[usize],
    buffer_meter: Option<&MemoryMeter>,
) -> Result<Mesh> {
    let p = setup.hosts.len();
    let me = setup.rank;
    if me >= p {
        return Err(Error::contract(format!("rank {me} not in a host map of {p}")));
    }
    let mut want = vec![false; p];
    for &n in neighbors {
        if n >= p {
            return Err(Error::contract(format!("neighbor {n} not in host map")));
        }
        if n != me {
            want[n] = true;
        }
    }
    let mut channels: Vec<Option<PeerChannel>> = (0..p).map(|_| None).collect();
    let t = setup.timeouts;
    for peer in (me + 1..p).filter(|&r| want[r]) {
        let addr = setup.hosts.resolve(peer)?;
        channels[peer] = Some(PeerChannel::connect(
            me,
            peer,
            addr,
            setup.attempt,
            t.connect,
            t.io,
            buffer_meter,
            setup.cancel,
        )?);
    }
    let mut pending = (0..me).filter(|&r| want[r]).count();
    while pending > 0 {
        let ch = PeerChannel::accept(
            listener,
            me,
            setup.attempt,
            |r| r < me && want[r] && channels[r].is_none(),
            t.connect,
            t.io,
            buffer_meter,
            setup.cancel,
        )?;
        let r = ch.remote_rank;
        channels[r] = Some(ch);
        pending -= 1;
    }
    let count = channels.iter().flatten().count();
    Ok(Mesh {
        rank: me,
        channels,
        stats: TransportStats {
            buffer_bytes: 2 * BUFFER_CAPACITY * count,
            buffer_allocations: 2 * count as u64,
            ..Default::default()
        },
    })
}

impl Mesh {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn channel_count(&self) -> usize {
        self.channels.iter().flatten().count()
    }

    pub fn peers(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.as_ref().map(|_| r))
            .collect()
    }

    pub fn stats(&self) -> &TransportStats {
        &self.stats
    }

    fn halves(&mut self, dest: usize, source: usize) -> Result<(&mut SendHalf, &mut RecvHalf)> {
        let me = self.rank;
        let missing = |r: usize| Error::contract(format!("rank {me} has no channel to rank {r}"));
        if dest.max(source) >= self.channels.len() {
            return Err(missing(dest.max(source)));
        }
        if dest == source {
            let ch = self.channels[dest].as_mut().ok_or_else(|| missing(dest))?;
            return Ok(ch.halves());
        }
        let (lo, hi) = (dest.min(source), dest.max(source));
        let (left, right) = self.channels.split_at_mut(hi);
        let low = left[lo].as_mut().ok_or_else(|| missing(lo))?;
        let high = right[0].as_mut().ok_or_else(|| missing(hi))?;
        let (to, from) = if dest < source { (low, high) } else { (high, low) };
        Ok((&mut to.tx, &mut from.rx))
    }

    fn count<T: Element>(&mut self, tag: Tag, elements: usize) {
        let i = tag.plane() as usize;
        self.stats.transfers[i] += 1;
        self.stats.elements_sent[i] += elements as u64;
        self.stats.bytes_sent[i] += (elements * T::WIDTH) as u64;
    }

    /// Sends `tile` to `dest` and replaces it with the tile arriving from
    /// `source`. When both are this rank the call is a no-op.
    pub fn sendrecv_replace<T: Element>(
        &mut self,
        dest: usize,
        source: usize,
        tile: &mut DenseTile<T>,
        tag: Tag,
    ) -> Result<()> {
        if dest == self.rank && source == self.rank {
            return Ok(());
        }
        let (tx, rx) = self.halves(dest, source)?;
        sendrecv_replace(tx, rx, tile.as_mut_slice(), tag)?;
        self.count::<T>(tag, tile.len());
        Ok(())
    }

    /// Sends `send` to `dest` while receiving `recv` from `source`.
    pub fn sendrecv<T: Element>(
        &mut self,
        dest: usize,
        source: usize,
        send: &DenseTile<T>,
        recv: &mut DenseTile<T>,
        tag: Tag,
    ) -> Result<()> {
        if dest == self.rank && source == self.rank {
            recv.as_mut_slice().copy_from_slice(send.as_slice());
            return Ok(());
        }
        let (tx, rx) = self.halves(dest, source)?;
        sendrecv(tx, rx, send.as_slice(), recv.as_mut_slice(), tag)?;
        self.count::<T>(tag, send.len());
        Ok(())
    }

    /// Closes every channel, completing whatever the peers still send.
    /// Returns the transfer counters and the number of frames drained.
    pub fn drain(mut self) -> Result<(TransportStats, usize)> {
        // every write side first, so no pair waits on each other's EOF
        for ch in self.channels.iter_mut().flatten() {
            ch.close_write()?;
        }
        let mut frames = 0;
        for ch in self.channels.iter_mut().flatten() {
            frames += ch.drain_incoming()?;
        }
        Ok((self.stats, frames))
    }
}
