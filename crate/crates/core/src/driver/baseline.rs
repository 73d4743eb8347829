// SPDX-License-Identifier: Apache-2.0

//! Naive distributed multiply used as the comparator.
//!
//! Worker `(i, j)` gathers the whole block row `A(i, *)` and block column
//! `B(*, j)` at once, then computes `C(i,j) = sum_k A(i,k) B(k,j)` in
//! ascending `k`. Nothing rotates, so every worker holds `2q + 1` tiles.

use std::time::Instant;

use crate::barrier::{FaultPoint, WorkerSession};
use crate::cannon::{CommCounters, DotStats};
use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tile::{local_dot_accumulate, DenseTile};
use crate::topology::{ShiftDim, TorusTopology};
use crate::transport::{establish_mesh, MeshSetup, Plane, Tag};

/// This worker's block of `C`, computed by all-gather.
pub fn allgather_product<T: Element>(
    session: &mut WorkerSession,
    a: &DenseTile<T>,
    b: &DenseTile<T>,
) -> Result<(DenseTile<T>, DotStats)> {
    let p = session.ctx.num_partitions;
    let rank = session.ctx.partition_id;
    let attempt = session.ctx.attempt;
    if !a.is_square() || !b.is_square() || a.rows() != b.rows() {
        return Err(Error::contract("blocks must be equal squares"));
    }
    let topo = TorusTopology::for_partitions(p)?;
    let q = topo.side();
    let (i, j) = topo.coords_of(rank)?;
    let s = a.rows();

    session.data_meter.reset_peak();
    let meter = session.data_meter.clone();
    let mut row_a: Vec<Option<DenseTile<T>>> = (0..q).map(|_| None).collect();
    let mut col_b: Vec<Option<DenseTile<T>>> = (0..q).map(|_| None).collect();
    let mut held = vec![meter.track(a.byte_len()), meter.track(b.byte_len())];
    let mut c = DenseTile::<T>::zeros(s, s);
    held.push(meter.track(c.byte_len()));

    let mut mesh = establish_mesh(
        &MeshSetup {
            rank,
            attempt,
            hosts: &session.ctx.host_map,
            timeouts: session.ctx.timeouts,
            cancel: Some(&session.ctx.cancel),
        },
        &session.listener,
        &topo.row_and_col_peers(rank)?,
        Some(&session.buffer_meter),
    )?;
    let channels = mesh.channel_count();
    let buffer_bytes = mesh.stats().buffer_bytes;
    session.ctx.check_fault(FaultPoint::BeforeBarrier)?;

    session.barrier.barrier_next()?;
    let started = Instant::now();
    let mut comm = CommCounters::default();
    for d in 1..q {
        let d = d as i64;
        // A(i, j+d) arrives from the right, ours goes to the left
        let pa = topo.shift_partners(rank, ShiftDim::Col, d)?;
        let mut got = DenseTile::<T>::zeros(s, s);
        held.push(meter.track(got.byte_len()));
        mesh.sendrecv(
            pa.dest,
            pa.source,
            a,
            &mut got,
            Tag::data(attempt, d as u32, Plane::AShift),
        )?;
        row_a[(j + d as usize) % q] = Some(got);
        comm.step_a += 1;
        comm.step_elements_a += a.len() as u64;
        comm.elements_a += a.len() as u64;

        let pb = topo.shift_partners(rank, ShiftDim::Row, d)?;
        let mut got = DenseTile::<T>::zeros(s, s);
        held.push(meter.track(got.byte_len()));
        mesh.sendrecv(
            pb.dest,
            pb.source,
            b,
            &mut got,
            Tag::data(attempt, d as u32, Plane::BShift),
        )?;
        col_b[(i + d as usize) % q] = Some(got);
        comm.step_b += 1;
        comm.step_elements_b += b.len() as u64;
        comm.elements_b += b.len() as u64;
        if d == 1 {
            session.ctx.check_fault(FaultPoint::MidRun)?;
        }
    }
    if q == 1 {
        session.ctx.check_fault(FaultPoint::MidRun)?;
    }
    for k in 0..q {
        let ak = row_a[k].as_ref().unwrap_or(a);
        let bk = col_b[k].as_ref().unwrap_or(b);
        local_dot_accumulate(&mut c, ak, bk)?;
    }
    session.barrier.barrier_next()?;
    let elapsed = started.elapsed();
    let (transport, _) = mesh.drain()?;
    drop(held);
    Ok((
        c,
        DotStats {
            elapsed,
            comm,
            transport,
            peak_data_bytes: session.data_meter.peak(),
            buffer_bytes,
            channels,
        },
    ))
}
