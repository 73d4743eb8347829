// SPDX-License-Identifier: Apache-2.0

//! Dense row-major blocks and the local multiply-accumulate kernel.

use crate::error::{Error, Result};
use crate::scalar::{Element, ElementType};

/// One worker's block of a matrix, stored contiguously in row-major order.
///
/// Element `(i, j)` lives at flat index `i * cols + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTile<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> DenseTile<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(format!(
                "tile dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "tile data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseTile { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tile dimensions must be positive");
        DenseTile {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "tile dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseTile { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> ElementType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Bytes occupied by the element data.
    pub fn byte_len(&self) -> usize {
        self.data.len() * T::WIDTH
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Sum of all elements, accumulated as `f64` in row-major order.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(T::zero());
    }
}

/// `c += a * b` on tiles.
///
/// The loop order is i-k-j: each `a[i,k]` is broadcast over row `k` of `b`
/// and accumulated into row `i` of `c`, so the innermost loop walks both
/// rows at unit stride with no branches.
pub fn local_dot_accumulate<T: Element>(
    c: &mut DenseTile<T>,
    a: &DenseTile<T>,
    b: &DenseTile<T>,
) -> Result<()> {
    if a.cols != b.rows || c.rows != a.rows || c.cols != b.cols {
        return Err(Error::contract(format!(
            "cannot accumulate {}x{} * {}x{} into {}x{}",
            a.rows, a.cols, b.rows, b.cols, c.rows, c.cols
        )));
    }
    gemm_acc(&mut c.data, &a.data, &b.data, a.rows, a.cols, b.cols);
    Ok(())
}

#[inline]
fn gemm_acc<T: Element>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij = T::mul_acc(*cij, aik, bkj);
            }
        }
    }
}

/// Sequential textbook product, used as the reference for everything
/// distributed. Indexed i-k-j loop, kept deliberately separate from the
/// kernel above.
pub fn oracle_multiply<T: Element>(a: &DenseTile<T>, b: &DenseTile<T>) -> Result<DenseTile<T>> {
    if a.cols != b.rows {
        return Err(Error::contract(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, inner, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for k in 0..inner {
            let aik = a.data[i * inner + k];
            for j in 0..n {
                out[i * n + j] = T::mul_acc(out[i * n + j], aik, b.data[k * n + j]);
            }
        }
    }
    DenseTile::new(m, n, out)
}

/// `q x q` grid of equally sized blocks, indexed `[block_row][block_col]`.
pub type BlockGrid<T> = Vec<Vec<DenseTile<T>>>;

/// Cuts a square `n x n` matrix into `q x q` blocks of side `n / q`.
pub fn split_into_blocks<T: Element>(m: &DenseTile<T>, q: usize) -> Result<BlockGrid<T>> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "only square matrices can be split, got {}x{}",
            m.rows, m.cols
        )));
    }
    if q == 0 {
        return Err(Error::contract("grid side q must be at least 1"));
    }
    let n = m.rows;
    if !n.is_multiple_of(q) {
        return Err(Error::GridIncompatible { n, q });
    }
    let side = n / q;
    let mut grid = Vec::with_capacity(q);
    for bi in 0..q {
        let mut row = Vec::with_capacity(q);
        for bj in 0..q {
            let mut data = Vec::with_capacity(side * side);
            for i in 0..side {
                let start = (bi * side + i) * n + bj * side;
                data.extend_from_slice(&m.data[start..start + side]);
            }
            row.push(DenseTile {
                rows: side,
                cols: side,
                data,
            });
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Inverse of [`split_into_blocks`].
pub fn assemble_from_blocks<T: Element>(blocks: &[Vec<DenseTile<T>>]) -> Result<DenseTile<T>> {
    let q = blocks.len();
    if q == 0 {
        return Err(Error::contract("empty block grid"));
    }
    let side = blocks[0]
        .first()
        .ok_or_else(|| Error::contract("empty block row"))?
        .rows;
    for (bi, row) in blocks.iter().enumerate() {
        if row.len() != q {
            return Err(Error::contract(format!(
                "block row {bi} has {} blocks, expected {q}",
                row.len()
            )));
        }
        for (bj, b) in row.iter().enumerate() {
            if b.rows != side || b.cols != side {
                return Err(Error::contract(format!(
                    "block ({bi},{bj}) is {}x{}, expected {side}x{side}",
                    b.rows, b.cols
                )));
            }
        }
    }
    let n = side * q;
    let mut data = Vec::with_capacity(n * n);
    for row in blocks {
        for i in 0..side {
            for b in row {
                data.extend_from_slice(b.row(i));
            }
        }
    }
    Ok(DenseTile {
        rows: n,
        cols: n,
        data,
    })
}

/// A tile whose element type is only known at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTile {
    F64(DenseTile<f64>),
    F32(DenseTile<f32>),
    I32(DenseTile<i32>),
}

impl AnyTile {
    pub fn dtype(&self) -> ElementType {
        match self {
            AnyTile::F64(_) => ElementType::F64,
            AnyTile::F32(_) => ElementType::F32,
            AnyTile::I32(_) => ElementType::I32,
        }
    }

    pub fn zeros(dtype: ElementType, rows: usize, cols: usize) -> Self {
        match dtype {
            ElementType::F64 => AnyTile::F64(DenseTile::zeros(rows, cols)),
            ElementType::F32 => AnyTile::F32(DenseTile::zeros(rows, cols)),
            ElementType::I32 => AnyTile::I32(DenseTile::zeros(rows, cols)),
        }
    }

    pub fn local_dot_accumulate(&mut self, a: &AnyTile, b: &AnyTile) -> Result<()> {
        match (self, a, b) {
            (AnyTile::F64(c), AnyTile::F64(a), AnyTile::F64(b)) => local_dot_accumulate(c, a, b),
            (AnyTile::F32(c), AnyTile::F32(a), AnyTile::F32(b)) => local_dot_accumulate(c, a, b),
            (AnyTile::I32(c), AnyTile::I32(a), AnyTile::I32(b)) => local_dot_accumulate(c, a, b),
            (c, a, b) => Err(Error::contract(format!(
                "element type mismatch: c={}, a={}, b={}",
                c.dtype(),
                a.dtype(),
                b.dtype()
            ))),
        }
    }
}

macro_rules! any_from {
    ($t:ty, $v:ident) => {
        impl From<DenseTile<$t>> for AnyTile {
            fn from(t: DenseTile<$t>) -> Self {
                AnyTile::$v(t)
            }
        }
    };
}

any_from!(f64, F64);
any_from!(f32, F32);
any_from!(i32, I32);
