// SPDX-License-Identifier: Apache-2.0

//! One connection to one peer, with its two fixed 8 MiB buffers.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::debug;

use super::wire::{AbortReason, ControlKind, FrameHeader, Plane, Tag, BUFFER_CAPACITY};
use crate::barrier::CancelToken;
use crate::error::{Error, Result};
use crate::meter::{MemoryMeter, Tracked};
use crate::scalar::Element;

fn alloc_buffer() -> Box<[u8]> {
    vec![0u8; BUFFER_CAPACITY].into_boxed_slice()
}

/// Outgoing direction of a [`PeerChannel`].
#[derive(Debug)]
pub struct SendHalf {
    stream: TcpStream,
    buf: Box<[u8]>,
    local_rank: u32,
    remote_rank: u32,
}

/// Incoming direction of a [`PeerChannel`].
#[derive(Debug)]
pub struct RecvHalf {
    stream: TcpStream,
    buf: Box<[u8]>,
    remote_rank: u32,
}

#[derive(Debug)]
pub struct PeerChannel {
    pub local_rank: usize,
    pub remote_rank: usize,
    pub(crate) tx: SendHalf,
    pub(crate) rx: RecvHalf,
    _buffers: Option<Tracked>,
}

impl PeerChannel {
    fn from_stream(
        stream: TcpStream,
        local_rank: usize,
        remote_rank: usize,
        io_timeout: Duration,
        meter: Option<&MemoryMeter>,
    ) -> Result<Self> {
        stream
            .set_nodelay(true)
            .and_then(|_| stream.set_read_timeout(Some(io_timeout)))
            .and_then(|_| stream.set_write_timeout(Some(io_timeout)))
            .map_err(|e| Error::transport("configuring socket", e))?;
        let rx_stream = stream
            .try_clone()
            .map_err(|e| Error::transport("cloning socket", e))?;
        Ok(PeerChannel {
            local_rank,
            remote_rank,
            tx: SendHalf {
                stream,
                buf: alloc_buffer(),
                local_rank: local_rank as u32,
                remote_rank: remote_rank as u32,
            },
            rx: RecvHalf {
                stream: rx_stream,
                buf: alloc_buffer(),
                remote_rank: remote_rank as u32,
            },
            _buffers: meter.map(|m| m.track(2 * BUFFER_CAPACITY)),
        })
    }

    /// Dials `addr`, retrying until `connect_timeout`, then announces
    /// `local_rank` with a join frame.
    #[allow(clippy::too_many_arguments)]
    pub fn connect(
        local_rank: usize,
        remote_rank: usize,
        addr: SocketAddr,
        attempt: u32,
        connect_timeout: Duration,
        io_timeout: Duration,
        meter: Option<&MemoryMeter>,
        cancel: Option<&CancelToken>,
    ) -> Result<Self> {
        let deadline = Instant::now() + connect_timeout;
        let stream = loop {
            check_cancel(cancel)?;
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Error::Setup(format!(
                    "rank {local_rank}: timed out after {connect_timeout:?} connecting to rank {remote_rank} at {addr}"
                )));
            }
            match TcpStream::connect_timeout(&addr, left.min(Duration::from_secs(1))) {
                Ok(s) => break s,
                Err(e) => {
                    debug!("rank {local_rank}: connect to {addr} failed ({e}), retrying");
                    thread::sleep(Duration::from_millis(10).min(left));
                }
            }
        };
        let mut ch = Self::from_stream(stream, local_rank, remote_rank, io_timeout, meter)?;
        ch.send_control(Tag::control(
            ControlKind::Join,
            attempt,
            0,
            AbortReason::Unspecified,
        ))?;
        Ok(ch)
    }

    /// Accepts one incoming channel whose join frame names a rank for which
    /// `expect` returns true and whose attempt matches.
    #[allow(clippy::too_many_arguments)]
    pub fn accept(
        listener: &TcpListener,
        local_rank: usize,
        attempt: u32,
        mut expect: impl FnMut(usize) -> bool,
        connect_timeout: Duration,
        io_timeout: Duration,
        meter: Option<&MemoryMeter>,
        cancel: Option<&CancelToken>,
    ) -> Result<Self> {
        let deadline = Instant::now() + connect_timeout;
        let stream = accept_until(listener, deadline, cancel).map_err(|e| {
            Error::Setup(format!(
                "rank {local_rank}: accept failed after {connect_timeout:?}: {e}"
            ))
        })?;
        stream
            .set_read_timeout(Some(
                deadline
                    .saturating_duration_since(Instant::now())
                    .max(Duration::from_millis(1)),
            ))
            .map_err(|e| Error::transport("configuring socket", e))?;
        let mut probe = &stream;
        let hello = FrameHeader::read_from(&mut probe)?;
        let ctl = hello
            .tag
            .as_control()
            .filter(|c| c.kind == ControlKind::Join)
            .ok_or_else(|| Error::Protocol(format!("expected join frame, got {:?}", hello.tag)))?;
        if ctl.attempt != attempt & 0xFF {
            return Err(Error::Protocol(format!(
                "join from rank {} is for attempt {}, this is attempt {attempt}",
                hello.source_rank, ctl.attempt
            )));
        }
        let remote = hello.source_rank as usize;
        if !expect(remote) {
            return Err(Error::Protocol(format!(
                "rank {local_rank}: unexpected join from rank {remote}"
            )));
        }
        Self::from_stream(stream, local_rank, remote, io_timeout, meter)
    }

    pub fn send_control(&mut self, tag: Tag) -> Result<()> {
        self.tx.send_frame(tag, &[])
    }

    /// Zero-length control frame on this channel.
    pub fn barrier_probe_send(&mut self, control_tag: Tag) -> Result<()> {
        if control_tag.plane() != Plane::Control {
            return Err(Error::contract(format!("{control_tag:?} is not a control tag")));
        }
        self.send_control(control_tag)
    }

    pub fn recv_header(&mut self) -> Result<FrameHeader> {
        self.rx.recv_header()
    }

    /// Half-closes the outgoing direction; the peer sees EOF after the
    /// frames already written.
    pub fn close_write(&mut self) -> Result<()> {
        let _ = self.tx.stream.flush();
        match self.tx.stream.shutdown(Shutdown::Write) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotConnected => Ok(()),
            Err(e) => Err(Error::transport("shutting down channel", e)),
        }
    }

    /// Consumes frames from the peer until it closes. Returns the number of
    /// frames consumed.
    pub fn drain_incoming(&mut self) -> Result<usize> {
        let mut frames = 0;
        while let Some(h) = FrameHeader::read_or_eof(&mut self.rx.stream)? {
            let mut left = h.payload_length as usize;
            while left > 0 {
                let n = left.min(BUFFER_CAPACITY);
                self.rx
                    .stream
                    .read_exact(&mut self.rx.buf[..n])
                    .map_err(|e| Error::transport("draining payload", e))?;
                left -= n;
            }
            frames += 1;
        }
        Ok(frames)
    }

    /// Finishes the channel: closes the outgoing direction, then completes
    /// whatever the peer still sends until it closes too.
    pub fn drain(mut self) -> Result<usize> {
        self.close_write()?;
        self.drain_incoming()
    }

    /// Both directions, borrowed separately.
    pub fn halves(&mut self) -> (&mut SendHalf, &mut RecvHalf) {
        (&mut self.tx, &mut self.rx)
    }

    pub fn send_elements<T: Element>(&mut self, data: &[T], tag: Tag) -> Result<()> {
        self.tx.send_elements(data, tag)
    }

    pub fn recv_elements<T: Element>(&mut self, out: &mut [T], tag: Tag) -> Result<()> {
        self.rx.recv_elements(out, tag)
    }

    pub fn send_bytes(&mut self, data: &[u8], tag: Tag) -> Result<()> {
        self.tx.send_bytes(data, tag)
    }

    pub fn recv_bytes(&mut self, out: &mut [u8], tag: Tag) -> Result<()> {
        self.rx.recv_bytes(out, tag)
    }
}

fn check_cancel(cancel: Option<&CancelToken>) -> Result<()> {
    if cancel.is_some_and(CancelToken::is_cancelled) {
        return Err(Error::Barrier(crate::barrier::BarrierOutcome::Aborted {
            rank: None,
            reason: AbortReason::Unspecified,
        }));
    }
    Ok(())
}

fn accept_until(
    listener: &TcpListener,
    deadline: Instant,
    cancel: Option<&CancelToken>,
) -> io::Result<TcpStream> {
    listener.set_nonblocking(true)?;
    let res = loop {
        match listener.accept() {
            Ok((s, _)) => break Ok(s),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    break Err(io::Error::new(io::ErrorKind::TimedOut, "no connection"));
                }
                if cancel.is_some_and(CancelToken::is_cancelled) {
                    break Err(io::Error::new(io::ErrorKind::Interrupted, "attempt cancelled"));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => break Err(e),
        }
    };
    listener.set_nonblocking(false)?;
    let s = res?;
    s.set_nonblocking(false)?;
    Ok(s)
}

fn chunk_elems<T: Element>() -> usize {
    BUFFER_CAPACITY / T::WIDTH
}

impl SendHalf {
    pub fn remote_rank(&self) -> usize {
        self.remote_rank as usize
    }

    fn header(&self, tag: Tag, len: usize) -> FrameHeader {
        FrameHeader {
            tag,
            source_rank: self.local_rank,
            payload_length: len as u64,
        }
    }

    fn send_frame(&mut self, tag: Tag, payload: &[u8]) -> Result<()> {
        self.header(tag, payload.len())
            .write_to(&mut self.stream)
            .and_then(|_| self.stream.write_all(payload))
            .map_err(|e| Error::transport("sending frame", e))
    }

    /// Streams `data` through the send buffer in chunks of at most 8 MiB.
    pub fn send_elements<T: Element>(&mut self, data: &[T], tag: Tag) -> Result<()> {
        self.header(tag, data.len() * T::WIDTH)
            .write_to(&mut self.stream)
            .map_err(|e| Error::transport("sending header", e))?;
        for chunk in data.chunks(chunk_elems::<T>()) {
            let bytes = chunk.len() * T::WIDTH;
            T::write_le(chunk, &mut self.buf[..bytes]);
            self.stream
                .write_all(&self.buf[..bytes])
                .map_err(|e| Error::transport("sending payload", e))?;
        }
        Ok(())
    }

    /// Streams raw bytes through the send buffer in chunks of at most 8 MiB.
    pub fn send_bytes(&mut self, data: &[u8], tag: Tag) -> Result<()> {
        self.header(tag, data.len())
            .write_to(&mut self.stream)
            .map_err(|e| Error::transport("sending header", e))?;
        for chunk in data.chunks(BUFFER_CAPACITY) {
            self.buf[..chunk.len()].copy_from_slice(chunk);
            self.stream
                .write_all(&self.buf[..chunk.len()])
                .map_err(|e| Error::transport("sending payload", e))?;
        }
        Ok(())
    }
}

impl RecvHalf {
    pub fn remote_rank(&self) -> usize {
        self.remote_rank as usize
    }

    pub fn recv_header(&mut self) -> Result<FrameHeader> {
        FrameHeader::read_from(&mut self.stream)
    }

    fn expect_header(&mut self, tag: Tag, bytes: usize) -> Result<()> {
        let h = self.recv_header()?;
        if h.tag != tag {
            return Err(Error::Protocol(format!(
                "expected {tag:?} from rank {}, got {:?}",
                self.remote_rank, h.tag
            )));
        }
        if h.source_rank != self.remote_rank {
            return Err(Error::Protocol(format!(
                "frame claims source rank {}, channel peer is {}",
                h.source_rank, self.remote_rank
            )));
        }
        if h.payload_length != bytes as u64 {
            return Err(Error::Protocol(format!(
                "payload size disagreement: expected {bytes} bytes from rank {}, got {}",
                self.remote_rank, h.payload_length
            )));
        }
        Ok(())
    }

    fn recv_chunk(&mut self, bytes: usize) -> Result<()> {
        self.stream
            .read_exact(&mut self.buf[..bytes])
            .map_err(|e| Error::transport("receiving payload", e))
    }

    pub fn recv_elements<T: Element>(&mut self, out: &mut [T], tag: Tag) -> Result<()> {
        self.expect_header(tag, out.len() * T::WIDTH)?;
        for chunk in out.chunks_mut(chunk_elems::<T>()) {
            let bytes = chunk.len() * T::WIDTH;
            self.recv_chunk(bytes)?;
            T::read_le(&self.buf[..bytes], chunk);
        }
        Ok(())
    }

    pub fn recv_bytes(&mut self, out: &mut [u8], tag: Tag) -> Result<()> {
        self.expect_header(tag, out.len())?;
        for chunk in out.chunks_mut(BUFFER_CAPACITY) {
            self.recv_chunk(chunk.len())?;
            chunk.copy_from_slice(&self.buf[..chunk.len()]);
        }
        Ok(())
    }

    fn kill(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

fn send_and_hand_off<'a, T: Element>(
    tx: &mut SendHalf,
    data: &'a mut [T],
    per_chunk: usize,
    tag: Tag,
    handoff: &mpsc::Sender<&'a mut [T]>,
) -> Result<()> {
    tx.header(tag, data.len() * T::WIDTH)
        .write_to(&mut tx.stream)
        .map_err(|e| Error::transport("sending header", e))?;
    for chunk in data.chunks_mut(per_chunk) {
        let n = chunk.len() * T::WIDTH;
        T::write_le(chunk, &mut tx.buf[..n]);
        // the receiver may already be gone on error; the write below then
        // fails on the killed socket
        let _ = handoff.send(chunk);
        tx.stream
            .write_all(&tx.buf[..n])
            .map_err(|e| Error::transport("sending payload", e))?;
    }
    Ok(())
}

fn join_both(send: thread::Result<Result<()>>, recv: Result<()>) -> Result<()> {
    let send = send.unwrap_or_else(|_| Err(Error::Transport("sender thread panicked".into())));
    match (recv, send) {
        // The receive side carries the more specific error (tag, size);
        // a send failure after it is usually the resulting shutdown.
        (Err(e), _) => Err(e),
        (Ok(()), r) => r,
    }
}

/// Sends `data` over `tx` while overwriting it with the payload arriving on
/// `rx`. Both directions progress concurrently.
///
/// Each chunk is copied once into the send buffer; only after that copy is
/// the same region of `data` handed to the receiver, which copies the
/// matching incoming chunk out of the receive buffer into it.
pub fn sendrecv_replace<T: Element>(
    tx: &mut SendHalf,
    rx: &mut RecvHalf,
    data: &mut [T],
    tag: Tag,
) -> Result<()> {
    let bytes = data.len() * T::WIDTH;
    let per_chunk = chunk_elems::<T>();
    let sizes: Vec<usize> = data.chunks(per_chunk).map(|c| c.len()).collect();
    let rx_kill = rx.stream.try_clone().ok();
    let tx_kill = tx.stream.try_clone().ok();
    thread::scope(|s| {
        let (handoff, handed) = mpsc::channel::<&mut [T]>();
        let sender = s.spawn(move || -> Result<()> {
            let r = send_and_hand_off(tx, data, per_chunk, tag, &handoff);
            if r.is_err() {
                if let Some(k) = &rx_kill {
                    let _ = k.shutdown(Shutdown::Both);
                }
            }
            r
        });
        let received = (|| {
            rx.expect_header(tag, bytes)?;
            for &len in &sizes {
                let n = len * T::WIDTH;
                rx.recv_chunk(n)?;
                let dst = handed
                    .recv()
                    .map_err(|_| Error::Transport("send side stopped mid-transfer".into()))?;
                T::read_le(&rx.buf[..n], dst);
            }
            Ok(())
        })();
        if received.is_err() {
            if let Some(k) = &tx_kill {
                let _ = k.shutdown(Shutdown::Both);
            }
            rx.kill();
        }
        join_both(sender.join(), received)
    })
}

/// Sends `send` over `tx` while receiving into `recv` from `rx`, both
/// directions concurrently.
pub fn sendrecv<T: Element>(
    tx: &mut SendHalf,
    rx: &mut RecvHalf,
    send: &[T],
    recv: &mut [T],
    tag: Tag,
) -> Result<()> {
    let rx_kill = rx.stream.try_clone().ok();
    let tx_kill = tx.stream.try_clone().ok();
    thread::scope(|s| {
        let sender = s.spawn(move || {
            let r = tx.send_elements(send, tag);
            if r.is_err() {
                if let Some(k) = &rx_kill {
                    let _ = k.shutdown(Shutdown::Both);
                }
            }
            r
        });
        let received = rx.recv_elements(recv, tag);
        if received.is_err() {
            if let Some(k) = &tx_kill {
                let _ = k.shutdown(Shutdown::Both);
            }
        }
        join_both(sender.join(), received)
    })
}
