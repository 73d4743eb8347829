// SPDX-License-Identifier: Apache-2.0

//! Seeded matrix generation.
//!
//! Each row of a matrix draws from its own ChaCha8 stream, and element
//! `(r, c)` sits at a fixed word offset within that stream. So any block can
//! be generated on its own and matches the same region of the full matrix
//! bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Element;
use crate::tile::DenseTile;

/// Which operand a generated matrix is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    A,
    B,
}

fn operand_seed(seed: u64, which: Operand) -> u64 {
    match which {
        Operand::A => seed,
        // splitmix64 increment, keeps B independent of A for every seed
        Operand::B => seed ^ 0x9E37_79B9_7F4A_7C15,
    }
}

fn fill_row<T: Element>(rng: &mut ChaCha8Rng, row: usize, col0: usize, out: &mut [T]) {
    rng.set_stream(row as u64);
    rng.set_word_pos(col0 as u128 * T::SAMPLE_WORDS as u128);
    for v in out {
        *v = T::sample(rng);
    }
}

/// The `n x n` operand `which` for `seed`. Floats are uniform in `[0, 1)`,
/// integers in `[0, 2^16)`.
pub fn generate_operand<T: Element>(n: usize, seed: u64, which: Operand) -> DenseTile<T> {
    generate_block(n, seed, which, 0, 0, n)
}

/// `generate_operand(n, seed, Operand::A)`.
pub fn generate_matrix<T: Element>(n: usize, seed: u64) -> DenseTile<T> {
    generate_operand(n, seed, Operand::A)
}

/// The `size x size` block of an operand with top-left corner
/// `(row0, col0)`. Positions at or beyond `n` are zero, which makes this
/// also the block of the zero-padded matrix.
pub fn generate_block<T: Element>(
    n: usize,
    seed: u64,
    which: Operand,
    row0: usize,
    col0: usize,
    size: usize,
) -> DenseTile<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(operand_seed(seed, which));
    let mut tile = DenseTile::<T>::zeros(size, size);
    let data = tile.as_mut_slice();
    for (r, out) in data.chunks_exact_mut(size).enumerate() {
        let row = row0 + r;
        if row >= n || col0 >= n {
            continue;
        }
        let width = size.min(n - col0);
        fill_row(&mut rng, row, col0, &mut out[..width]);
    }
    tile
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tile::split_into_blocks;

    #[test]
    fn deterministic() {
        let a: DenseTile<f64> = generate_matrix(4, 7);
        let b: DenseTile<f64> = generate_matrix(4, 7);
        assert_eq!(a, b);
        let c: DenseTile<f64> = generate_matrix(4, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn single_element() {
        let a: DenseTile<i32> = generate_matrix(1, 3);
        assert_eq!(a.len(), 1);
        assert!((0..1 << 16).contains(&a.get(0, 0)));
    }

    #[test]
    fn operands_differ() {
        let a: DenseTile<f64> = generate_operand(8, 1, Operand::A);
        let b: DenseTile<f64> = generate_operand(8, 1, Operand::B);
        assert_ne!(a, b);
    }

    #[test]
    fn mean_near_half() {
        let a: DenseTile<f64> = generate_matrix(1024, 42);
        let mean = a.sum_f64() / a.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!(a.as_slice().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn blocks_match_full_matrix() {
        fn check<T: Element>() {
            let n = 12;
            let full: DenseTile<T> = generate_operand(n, 5, Operand::B);
            for q in [1, 2, 3, 4] {
                let blocks = split_into_blocks(&full, q).unwrap();
                let s = n / q;
                for (i, row) in blocks.iter().enumerate() {
                    for (j, blk) in row.iter().enumerate() {
                        let g: DenseTile<T> = generate_block(n, 5, Operand::B, i * s, j * s, s);
                        assert_eq!(&g, blk);
                    }
                }
            }
        }
        check::<f64>();
        check::<f32>();
        check::<i32>();
    }

    #[test]
    fn padded_block_is_zero_outside() {
        let full: DenseTile<f64> = generate_matrix(5, 2);
        let blk: DenseTile<f64> = generate_block(5, 2, Operand::A, 3, 3, 3);
        assert_eq!(blk.get(0, 0), full.get(3, 3));
        assert_eq!(blk.get(1, 1), full.get(4, 4));
        assert_eq!(blk.get(2, 0), 0.0);
        assert_eq!(blk.get(0, 2), 0.0);
    }
}
