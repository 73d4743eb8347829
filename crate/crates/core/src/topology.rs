// SPDX-License-Identifier: Apache-2.0

//! Square periodic process grid.
//!
//! Ranks are numbered row-major: `rank = row * q + col`. A positive shift
//! displacement moves data toward lower indices (left along a row, up along a
//! column); any displacement is reduced modulo `q`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftDim {
    /// Rotate within a column; changes the row coordinate (B-plane).
    Row,
    /// Rotate within a row; changes the column coordinate (A-plane).
    Col,
}

/// Ranks to receive from and send to for one circular shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftPartners {
    pub source: usize,
    pub dest: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TorusTopology {
    q: usize,
}

impl TorusTopology {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::Config("grid side q must be at least 1".into()));
        }
        Ok(TorusTopology { q })
    }

    /// Grid for `p` ranks; `p` must be a positive perfect square.
    pub fn for_partitions(p: usize) -> Result<Self> {
        match exact_sqrt(p) {
            Some(q) if q > 0 => Ok(TorusTopology { q }),
            _ => Err(Error::Config(format!(
                "number of partitions {p} is not a positive perfect square"
            ))),
        }
    }

    pub fn side(&self) -> usize {
        self.q
    }

    pub fn size(&self) -> usize {
        self.q * self.q
    }

    pub fn coords_of(&self, rank: usize) -> Result<(usize, usize)> {
        self.check(rank)?;
        Ok((rank / self.q, rank % self.q))
    }

    /// Row-major rank of `(row, col)`, both reduced modulo `q`.
    pub fn rank_of(&self, row: usize, col: usize) -> usize {
        (row % self.q) * self.q + col % self.q
    }

    pub fn shift_partners(&self, rank: usize, dim: ShiftDim, displacement: i64) -> Result<ShiftPartners> {
        let (row, col) = self.coords_of(rank)?;
        let q = self.q as i64;
        let d = displacement.rem_euclid(q) as usize;
        let back = (q as usize - d) % self.q;
        Ok(match dim {
            ShiftDim::Col => ShiftPartners {
                source: self.rank_of(row, col + d),
                dest: self.rank_of(row, col + back),
            },
            ShiftDim::Row => ShiftPartners {
                source: self.rank_of(row + d, col),
                dest: self.rank_of(row + back, col),
            },
        })
    }

    /// All other ranks sharing a row or a column with `rank`, ascending.
    pub fn row_and_col_peers(&self, rank: usize) -> Result<Vec<usize>> {
        let (row, col) = self.coords_of(rank)?;
        let mut peers: Vec<usize> = (0..self.q)
            .filter(|&c| c != col)
            .map(|c| self.rank_of(row, c))
            .chain((0..self.q).filter(|&r| r != row).map(|r| self.rank_of(r, col)))
            .collect();
        peers.sort_unstable();
        Ok(peers)
    }

    fn check(&self, rank: usize) -> Result<()> {
        if rank >= self.size() {
            return Err(Error::contract(format!(
                "rank {rank} out of range for a {q}x{q} grid",
                q = self.q
            )));
        }
        Ok(())
    }
}

pub fn exact_sqrt(p: usize) -> Option<usize> {
    let r = (p as f64).sqrt().round() as usize;
    (r.checked_mul(r) == Some(p)).then_some(r)
}
