// SPDX-License-Identifier: Apache-2.0

//! Per-worker Cannon's algorithm on a `q x q` torus.
//!
//! Worker `(i, j)` starts with blocks `A(i,j)` and `B(i,j)`. The alignment
//! phase rotates row `i` of A left by `i` and column `j` of B up by `j`, each
//! as a single direct transfer, so that the worker holds `A(i, i+j)` and
//! `B(i+j, j)`. Then `q` rounds of local multiply-accumulate follow, with a
//! unit rotation of A (left) and B (up) between consecutive rounds. The
//! rotation after the last round is skipped; it only restores the inputs.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::barrier::{FaultPoint, WorkerSession};
use crate::error::{Error, Result};
use crate::scalar::{Element, ElementType};
use crate::tile::{local_dot_accumulate, AnyTile, DenseTile};
use crate::topology::{ShiftDim, ShiftPartners, TorusTopology};
use crate::transport::{establish_mesh, Mesh, MeshSetup, Plane, Tag, TransportStats};

/// Static schedule for one worker.
#[derive(Clone, Debug)]
pub struct CannonPlan {
    topo: TorusTopology,
    rank: usize,
    coords: (usize, usize),
    tile_n: usize,
    dtype: ElementType,
    attempt: u32,
}

impl CannonPlan {
    pub fn new(
        num_partitions: usize,
        rank: usize,
        tile_n: usize,
        dtype: ElementType,
        attempt: u32,
    ) -> Result<Self> {
        let topo = TorusTopology::for_partitions(num_partitions)?;
        let coords = topo.coords_of(rank)?;
        if tile_n == 0 {
            return Err(Error::contract("tile side must be positive"));
        }
        Ok(CannonPlan {
            topo,
            rank,
            coords,
            tile_n,
            dtype,
            attempt,
        })
    }

    pub fn q(&self) -> usize {
        self.topo.side()
    }

    pub fn coords(&self) -> (usize, usize) {
        self.coords
    }

    pub fn tile_n(&self) -> usize {
        self.tile_n
    }

    pub fn dtype(&self) -> ElementType {
        self.dtype
    }

    pub fn topology(&self) -> &TorusTopology {
        &self.topo
    }

    /// Every rank this worker exchanges with: its whole row and column.
    pub fn neighbors(&self) -> Vec<usize> {
        self.topo
            .row_and_col_peers(self.rank)
            .expect("rank validated at construction")
    }

    fn partners(&self, dim: ShiftDim, d: i64) -> ShiftPartners {
        self.topo
            .shift_partners(self.rank, dim, d)
            .expect("rank validated at construction")
    }

    pub fn a_skew(&self) -> ShiftPartners {
        self.partners(ShiftDim::Col, self.coords.0 as i64)
    }

    pub fn b_skew(&self) -> ShiftPartners {
        self.partners(ShiftDim::Row, self.coords.1 as i64)
    }

    pub fn a_step(&self) -> ShiftPartners {
        self.partners(ShiftDim::Col, 1)
    }

    pub fn b_step(&self) -> ShiftPartners {
        self.partners(ShiftDim::Row, 1)
    }

    /// Displacements that undo alignment plus `q - 1` unit rotations.
    fn unskew_displacements(&self) -> (i64, i64) {
        let (i, j) = self.coords;
        (1 - i as i64, 1 - j as i64)
    }

    /// Tag for a transfer in `plane`. Phase 0 is the alignment, phase `k`
    /// the rotation after round `k - 1`, phase `q` the optional restore.
    pub fn tag(&self, phase: u32, plane: Plane) -> Tag {
        Tag::data(self.attempt, phase, plane)
    }

    /// A-block column and B-block row held before round `k`.
    pub fn block_index_at_round(&self, k: usize) -> usize {
        let (i, j) = self.coords;
        (i + j + k) % self.q()
    }
}

/// Transfers per plane and phase, as performed by this worker.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounters {
    pub skew_a: u64,
    pub skew_b: u64,
    pub step_a: u64,
    pub step_b: u64,
    pub unskew_a: u64,
    pub unskew_b: u64,
    /// Elements sent during round-to-round rotations, per plane.
    pub step_elements_a: u64,
    pub step_elements_b: u64,
    /// Elements sent in all phases, per plane.
    pub elements_a: u64,
    pub elements_b: u64,
}

impl CommCounters {
    pub fn a_transfers(&self) -> u64 {
        self.skew_a + self.step_a + self.unskew_a
    }

    pub fn b_transfers(&self) -> u64 {
        self.skew_b + self.step_b + self.unskew_b
    }
}

#[derive(Clone, Copy)]
enum Phase {
    Skew,
    Step,
    Unskew,
}

#[allow(clippy::too_many_arguments)]
fn shift<T: Element>(
    plan: &CannonPlan,
    mesh: &mut Mesh,
    tile: &mut DenseTile<T>,
    partners: ShiftPartners,
    phase_no: u32,
    plane: Plane,
    phase: Phase,
    counters: &mut CommCounters,
) -> Result<()> {
    if partners.dest == plan.rank {
        return Ok(());
    }
    mesh.sendrecv_replace(partners.dest, partners.source, tile, plan.tag(phase_no, plane))?;
    let n = tile.len() as u64;
    let (count, elements, step_elements) = match plane {
        Plane::AShift => (
            match phase {
                Phase::Skew => &mut counters.skew_a,
                Phase::Step => &mut counters.step_a,
                Phase::Unskew => &mut counters.unskew_a,
            },
            &mut counters.elements_a,
            &mut counters.step_elements_a,
        ),
        _ => (
            match phase {
                Phase::Skew => &mut counters.skew_b,
                Phase::Step => &mut counters.step_b,
                Phase::Unskew => &mut counters.unskew_b,
            },
            &mut counters.elements_b,
            &mut counters.step_elements_b,
        ),
    };
    *count += 1;
    *elements += n;
    if matches!(phase, Phase::Step) {
        *step_elements += n;
    }
    Ok(())
}

/// Initial alignment: A rotated left by `i` within the row, B up by `j`
/// within the column. Workers in row 0 (column 0) move no A (B) data.
pub fn skew<T: Element>(
    plan: &CannonPlan,
    mesh: &mut Mesh,
    a: &mut DenseTile<T>,
    b: &mut DenseTile<T>,
    counters: &mut CommCounters,
) -> Result<()> {
    shift(
        plan,
        mesh,
        a,
        plan.a_skew(),
        0,
        Plane::AShift,
        Phase::Skew,
        counters,
    )?;
    shift(
        plan,
        mesh,
        b,
        plan.b_skew(),
        0,
        Plane::BShift,
        Phase::Skew,
        counters,
    )
}

/// Round `k`: `c += a * b`, then rotate A left and B up by one, except
/// after the final round.
pub fn cannon_step<T: Element>(
    plan: &CannonPlan,
    mesh: &mut Mesh,
    c: &mut DenseTile<T>,
    a: &mut DenseTile<T>,
    b: &mut DenseTile<T>,
    k: usize,
    counters: &mut CommCounters,
) -> Result<()> {
    let q = plan.q();
    if k >= q {
        return Err(Error::contract(format!("round {k} out of range for q={q}")));
    }
    local_dot_accumulate(c, a, b)?;
    if k + 1 < q {
        let phase = (k + 1) as u32;
        shift(
            plan,
            mesh,
            a,
            plan.a_step(),
            phase,
            Plane::AShift,
            Phase::Step,
            counters,
        )?;
        shift(
            plan,
            mesh,
            b,
            plan.b_step(),
            phase,
            Plane::BShift,
            Phase::Step,
            counters,
        )?;
    }
    Ok(())
}

/// Puts A and B back where they started after a full run.
pub fn unskew<T: Element>(
    plan: &CannonPlan,
    mesh: &mut Mesh,
    a: &mut DenseTile<T>,
    b: &mut DenseTile<T>,
    counters: &mut CommCounters,
) -> Result<()> {
    let (da, db) = plan.unskew_displacements();
    let phase = plan.q() as u32;
    let pa = plan.partners(ShiftDim::Col, da);
    let pb = plan.partners(ShiftDim::Row, db);
    shift(plan, mesh, a, pa, phase, Plane::AShift, Phase::Unskew, counters)?;
    shift(plan, mesh, b, pb, phase, Plane::BShift, Phase::Unskew, counters)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DotOptions {
    /// Restore `a` and `b` to their input layout afterwards.
    pub unskew: bool,
}

/// Measurements of one collective multiply on one worker.
#[derive(Clone, Debug, Default)]
pub struct DotStats {
    /// Time between the opening and the closing barrier.
    pub elapsed: Duration,
    pub comm: CommCounters,
    pub transport: TransportStats,
    /// Peak live tile bytes during the call.
    pub peak_data_bytes: usize,
    /// Transport buffer bytes held by the mesh.
    pub buffer_bytes: usize,
    pub channels: usize,
}

/// This worker's block of `C = A * B`.
///
/// Collective: every worker of the gang calls it with its own equally sized
/// square blocks. Builds the mesh, meets the gang at a barrier, runs the
/// alignment and the `q` rounds, meets again, then tears the mesh down.
/// Only the span between the two barriers is timed.
pub fn dot_product<T: Element>(
    session: &mut WorkerSession,
    a: &mut DenseTile<T>,
    b: &mut DenseTile<T>,
    opts: DotOptions,
) -> Result<(DenseTile<T>, DotStats)> {
    let p = session.ctx.num_partitions;
    let rank = session.ctx.partition_id;
    if !a.is_square() || a.rows() != b.rows() || !b.is_square() {
        return Err(Error::contract(format!(
            "blocks must be equal squares, got {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let plan = CannonPlan::new(p, rank, a.rows(), T::DTYPE, session.ctx.attempt)?;

    session.data_meter.reset_peak();
    let _a_bytes = session.data_meter.track(a.byte_len());
    let _b_bytes = session.data_meter.track(b.byte_len());
    let mut c = DenseTile::<T>::zeros(a.rows(), a.cols());
    let _c_bytes = session.data_meter.track(c.byte_len());

    let mut mesh = establish_mesh(
        &MeshSetup {
            rank,
            attempt: session.ctx.attempt,
            hosts: &session.ctx.host_map,
            timeouts: session.ctx.timeouts,
            cancel: Some(&session.ctx.cancel),
        },
        &session.listener,
        &plan.neighbors(),
        Some(&session.buffer_meter),
    )?;
    let channels = mesh.channel_count();
    let buffer_bytes = mesh.stats().buffer_bytes;
    session.ctx.check_fault(FaultPoint::BeforeBarrier)?;

    session.barrier.barrier_next()?;
    let started = Instant::now();
    let mut comm = CommCounters::default();
    skew(&plan, &mut mesh, a, b, &mut comm)?;
    session.ctx.check_fault(FaultPoint::MidRun)?;
    for k in 0..plan.q() {
        cannon_step(&plan, &mut mesh, &mut c, a, b, k, &mut comm)?;
    }
    if opts.unskew {
        unskew(&plan, &mut mesh, a, b, &mut comm)?;
    }
    session.barrier.barrier_next()?;
    let elapsed = started.elapsed();

    let (transport, _) = mesh.drain()?;
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

/// [`dot_product`] on tiles whose element type is only known at run time.
/// A and B must have the same element type.
pub fn dot_product_any(
    session: &mut WorkerSession,
    a: &mut AnyTile,
    b: &mut AnyTile,
    opts: DotOptions,
) -> Result<(AnyTile, DotStats)> {
    match (a, b) {
        (AnyTile::F64(a), AnyTile::F64(b)) => dot_product(session, a, b, opts).map(|(c, s)| (c.into(), s)),
        (AnyTile::F32(a), AnyTile::F32(b)) => dot_product(session, a, b, opts).map(|(c, s)| (c.into(), s)),
        (AnyTile::I32(a), AnyTile::I32(b)) => dot_product(session, a, b, opts).map(|(c, s)| (c.into(), s)),
        (a, b) => Err(Error::contract(format!(
            "mixed element types: A is {}, B is {}",
            a.dtype(),
            b.dtype()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q2_alignment_formula() {
        let plan = CannonPlan::new(4, 2, 1, ElementType::F64, 0).unwrap();
        assert_eq!(plan.coords(), (1, 0));
        // worker (1,0) ends up with A(1,1) and B(1,0)
        assert_eq!(plan.block_index_at_round(0), 1);
        assert_eq!(plan.a_skew().source, 3);
        assert_eq!(plan.b_skew().source, 2);
    }

    #[test]
    fn rejects_non_square_gang() {
        assert!(matches!(
            CannonPlan::new(8, 0, 4, ElementType::F64, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tags_distinguish_phase_plane_attempt() {
        let p0 = CannonPlan::new(9, 4, 2, ElementType::F64, 0).unwrap();
        let p1 = CannonPlan::new(9, 4, 2, ElementType::F64, 1).unwrap();
        let mut seen = std::collections::HashSet::new();
        for plan in [&p0, &p1] {
            for phase in 0..=3 {
                for plane in [Plane::AShift, Plane::BShift] {
                    assert!(seen.insert(plan.tag(phase, plane)));
                }
            }
        }
    }

    #[test]
    fn unskew_restores_offsets() {
        for q in 1..6usize {
            let p = q * q;
            for rank in 0..p {
                let plan = CannonPlan::new(p, rank, 1, ElementType::F64, 0).unwrap();
                let (i, j) = plan.coords();
                let (da, db) = plan.unskew_displacements();
                // A column offset after alignment and q-1 unit rotations
                let off_a = (i + q - 1) % q;
                let off_b = (j + q - 1) % q;
                assert_eq!((off_a as i64 + da).rem_euclid(q as i64), 0);
                assert_eq!((off_b as i64 + db).rem_euclid(q as i64), 0);
            }
        }
    }
}
