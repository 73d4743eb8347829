// SPDX-License-Identifier: Apache-2.0

//! Element types a tile can hold.
//!
//! Everything numeric in the crate is generic over [`Element`]; the three
//! implementations are `f64`, `f32` and `i32`. Integer accumulation wraps on
//! overflow.

use std::fmt;
use std::str::FromStr;

use num_traits::{One, ToPrimitive, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Runtime tag for the element type of a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F64,
    F32,
    I32,
}

impl ElementType {
    pub const ALL: [ElementType; 3] = [ElementType::F64, ElementType::F32, ElementType::I32];

    pub const fn width(self) -> usize {
        match self {
            ElementType::F64 => 8,
            ElementType::F32 | ElementType::I32 => 4,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            ElementType::F64 => "f64",
            ElementType::F32 => "f32",
            ElementType::I32 => "i32",
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" | "float64" | "double" => Ok(ElementType::F64),
            "f32" | "float32" | "float" => Ok(ElementType::F32),
            "i32" | "int32" | "int" => Ok(ElementType::I32),
            other => Err(format!(
                "unknown element type `{other}` (expected f64, f32 or i32)"
            )),
        }
    }
}

/// Upper bound (exclusive) of generated integer elements.
pub const INT_SAMPLE_RANGE: u32 = 1 << 16;

/// A scalar that can live in a [`DenseTile`](crate::DenseTile) and travel
/// over the wire.
pub trait Element: Copy + Send + Sync + PartialEq + fmt::Debug + Zero + One + ToPrimitive + 'static {
    const DTYPE: ElementType;
    const WIDTH: usize;

    /// `acc + a * b`, wrapping for integers.
    fn mul_acc(acc: Self, a: Self, b: Self) -> Self;

    fn add(a: Self, b: Self) -> Self;

    /// Writes `src` as little-endian bytes; `dst.len()` must equal
    /// `src.len() * WIDTH`.
    fn write_le(src: &[Self], dst: &mut [u8]);

    fn read_le(src: &[u8], dst: &mut [Self]);

    /// Number of 32-bit RNG words one sample consumes.
    const SAMPLE_WORDS: u64;

    /// Floats are uniform in `[0, 1)`, integers uniform in `[0, 2^16)`.
    fn sample<R: RngCore>(rng: &mut R) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! le_codec {
    ($t:ty, $w:expr) => {
        fn write_le(src: &[Self], dst: &mut [u8]) {
            debug_assert_eq!(dst.len(), src.len() * $w);
            for (out, v) in dst.chunks_exact_mut($w).zip(src) {
                out.copy_from_slice(&v.to_le_bytes());
            }
        }

        fn read_le(src: &[u8], dst: &mut [Self]) {
            debug_assert_eq!(src.len(), dst.len() * $w);
            for (v, bytes) in dst.iter_mut().zip(src.chunks_exact($w)) {
                let mut raw = [0u8; $w];
                raw.copy_from_slice(bytes);
                *v = <$t>::from_le_bytes(raw);
            }
        }
    };
}

impl Element for f64 {
    const DTYPE: ElementType = ElementType::F64;
    const WIDTH: usize = 8;
    const SAMPLE_WORDS: u64 = 2;

    #[inline(always)]
    fn mul_acc(acc: Self, a: Self, b: Self) -> Self {
        acc + a * b
    }

    #[inline(always)]
    fn add(a: Self, b: Self) -> Self {
        a + b
    }

    le_codec!(f64, 8);

    fn sample<R: RngCore>(rng: &mut R) -> Self {
        // 53 high bits -> [0, 1)
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl Element for f32 {
    const DTYPE: ElementType = ElementType::F32;
    const WIDTH: usize = 4;
    const SAMPLE_WORDS: u64 = 1;

    #[inline(always)]
    fn mul_acc(acc: Self, a: Self, b: Self) -> Self {
        acc + a * b
    }

    #[inline(always)]
    fn add(a: Self, b: Self) -> Self {
        a + b
    }

    le_codec!(f32, 4);

    fn sample<R: RngCore>(rng: &mut R) -> Self {
        (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }
}

impl Element for i32 {
    const DTYPE: ElementType = ElementType::I32;
    const WIDTH: usize = 4;
    const SAMPLE_WORDS: u64 = 1;

    #[inline(always)]
    fn mul_acc(acc: Self, a: Self, b: Self) -> Self {
        acc.wrapping_add(a.wrapping_mul(b))
    }

    #[inline(always)]
    fn add(a: Self, b: Self) -> Self {
        a.wrapping_add(b)
    }

    le_codec!(i32, 4);

    fn sample<R: RngCore>(rng: &mut R) -> Self {
        (rng.next_u32() >> 16) as i32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn widths() {
        assert_eq!(ElementType::F64.width(), 8);
        assert_eq!(ElementType::F32.width(), 4);
        assert_eq!(ElementType::I32.width(), 4);
        assert_eq!(<f64 as Element>::WIDTH, 8);
        assert_eq!(<f32 as Element>::WIDTH, 4);
        assert_eq!(<i32 as Element>::WIDTH, 4);
    }

    #[test]
    fn parse_names() {
        for t in ElementType::ALL {
            assert_eq!(t.name().parse::<ElementType>().unwrap(), t);
        }
        assert_eq!("double".parse::<ElementType>().unwrap(), ElementType::F64);
        assert!("f16".parse::<ElementType>().is_err());
    }

    #[test]
    fn integer_accumulation_wraps() {
        assert_eq!(i32::mul_acc(i32::MAX, 1, 1), i32::MIN);
        assert_eq!(i32::mul_acc(0, 1 << 16, 1 << 16), 0);
    }

    #[test]
    fn sample_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x = f64::sample(&mut rng);
            assert!((0.0..1.0).contains(&x));
            let y = f32::sample(&mut rng);
            assert!((0.0..1.0).contains(&y));
            let z = i32::sample(&mut rng);
            assert!((0..INT_SAMPLE_RANGE as i32).contains(&z));
        }
    }

    #[test]
    fn le_codec_layout() {
        let mut out = [0u8; 8];
        f64::write_le(&[1.0], &mut out);
        assert_eq!(out, 1.0f64.to_le_bytes());
        let mut back = [0.0f64];
        f64::read_le(&out, &mut back);
        assert_eq!(back[0], 1.0);

        let mut out = [0u8; 8];
        i32::write_le(&[1, -1], &mut out);
        assert_eq!(out, [1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]);
    }
}
