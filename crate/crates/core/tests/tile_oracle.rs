// SPDX-License-Identifier: Apache-2.0

use cannon::{
    assemble_from_blocks, local_dot_accumulate, oracle_multiply, split_into_blocks, DenseTile, Error,
};
use proptest::prelude::*;

fn tile<T: cannon::Element>(rows: &[&[T]]) -> DenseTile<T> {
    let n = rows.len();
    DenseTile::new(
        n,
        rows[0].len(),
        rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )
    .unwrap()
}

// expected products computed with exact rational arithmetic, then rounded
#[test]
fn frozen_f64_3x3() {
    let a = tile::<f64>(&[&[1.125, -2.5, 0.375], &[4.0, 0.001, -3.75], &[2.5, 1.5, -0.125]]);
    let b = tile::<f64>(&[&[0.5, 3.25, -1.0], &[-2.0, 0.125, 6.5], &[1.75, -0.004, 2.0]]);
    let want = [
        [6.21875, 3.34225, -16.625],
        [-4.5645, 13.015125, -11.4935],
        [-1.96875, 8.313, 7.0],
    ];
    let mut kernel = DenseTile::zeros(3, 3);
    local_dot_accumulate(&mut kernel, &a, &b).unwrap();
    for got in [oracle_multiply(&a, &b).unwrap(), kernel] {
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                let g = got.get(i, j);
                assert!((g - w).abs() <= 1e-12 * w.abs(), "({i},{j}): {g} vs {w}");
            }
        }
    }
}

const AI: [[i32; 8]; 8] = [
    [309, -772, -949, 518, -437, -499, -543, -715],
    [508, -791, 385, 516, 827, 116, -822, 209],
    [-136, -935, -939, -809, -553, -524, 34, 232],
    [-946, 149, -593, 466, 330, 436, 116, -141],
    [-549, -81, 206, -431, 657, 780, -987, 554],
    [650, -674, 429, -135, -304, -431, -682, -560],
    [960, 563, -311, -791, -811, -222, -802, -265],
    [735, -296, 236, -459, 652, -912, 494, -60],
];
const BI: [[i32; 8]; 8] = [
    [98, -745, 992, 888, -225, -839, 130, -400],
    [698, 287, 266, 813, 764, -260, 182, -607],
    [442, -858, -907, 354, -534, 583, -408, -837],
    [751, -524, 774, -794, -222, -431, -72, 301],
    [708, -253, -667, -242, -273, -571, 372, -454],
    [437, 918, 399, 327, -854, 247, 300, -650],
    [93, 493, -499, -666, -54, -223, -448, 895],
    [310, 409, 140, -551, 402, -336, 726, 573],
];
const CI: [[i32; 8]; 8] = [
    [
        -1338622, -816614, 1626086, -402298, 19776, -347453, -338528, 922303,
    ],
    [
        679904, -1628699, 277832, -195302, -1235195, -548976, 590280, -956783,
    ],
    [-2233985, 833080, 17174, -758981, 687177, 259247, 43794, 1919407],
    [490404, 1328420, -124033, -1235690, 14516, 149159, 211756, 514371],
    [
        542996, 724668, -643516, 309927, -522156, 639000, 1183656, -1404587,
    ],
    [
        -959124, -1859042, 264640, 983697, -597528, 345555, -546892, -763694,
    ],
    [
        -1072387, -374681, 1587378, 2631974, 903577, -116079, 209720, -1060666,
    ],
    [
        -284561, -1377669, -972612, 108070, 134411, -891846, -317490, 254523,
    ],
];

fn from_rows<const N: usize>(m: &[[i32; N]; N]) -> DenseTile<i32> {
    DenseTile::from_fn(N, N, |i, j| m[i][j])
}

#[test]
fn frozen_i32_8x8() {
    let (a, b, c) = (from_rows(&AI), from_rows(&BI), from_rows(&CI));
    assert_eq!(oracle_multiply(&a, &b).unwrap(), c);
    let mut kernel = DenseTile::zeros(8, 8);
    local_dot_accumulate(&mut kernel, &a, &b).unwrap();
    assert_eq!(kernel, c);
}

#[test]
fn frozen_i32_blocked_accumulation() {
    // C = sum over k of A[i,k] B[k,j] on a 2x2 block grid
    let (a, b) = (from_rows(&AI), from_rows(&BI));
    let (ab, bb) = (
        split_into_blocks(&a, 2).unwrap(),
        split_into_blocks(&b, 2).unwrap(),
    );
    let mut grid = vec![vec![DenseTile::zeros(4, 4); 2]; 2];
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            for k in 0..2 {
                local_dot_accumulate(c, &ab[i][k], &bb[k][j]).unwrap();
            }
        }
    }
    assert_eq!(assemble_from_blocks(&grid).unwrap(), from_rows(&CI));
}

#[test]
fn frozen_i32_wraparound() {
    let a = tile::<i32>(&[&[(1 << 30) + 7, 3], &[-5, 1 << 29]]);
    let b = tile::<i32>(&[&[4, 1], &[i32::MAX, 2]]);
    let want = tile::<i32>(&[&[-2147483623, 1073741837], &[-536870932, 1073741819]]);
    assert_eq!(oracle_multiply(&a, &b).unwrap(), want);
}

#[test]
fn shape_mismatch_is_contract_error() {
    let a = DenseTile::<f64>::zeros(2, 3);
    let b = DenseTile::<f64>::zeros(2, 3);
    assert!(matches!(oracle_multiply(&a, &b), Err(Error::Contract(_))));
    let mut c = DenseTile::zeros(2, 2);
    assert!(matches!(
        local_dot_accumulate(&mut c, &a, &b),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        DenseTile::new(2, 2, vec![1.0f64; 3]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn indivisible_split_names_n_and_q() {
    let m = DenseTile::<f64>::zeros(10, 10);
    assert!(matches!(
        split_into_blocks(&m, 3),
        Err(Error::GridIncompatible { n: 10, q: 3 })
    ));
}

fn int_matrix(max_n: usize) -> impl Strategy<Value = (usize, Vec<i32>, Vec<i32>)> {
    (1..=max_n).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-50i32..50, n * n),
            prop::collection::vec(-50i32..50, n * n),
        )
    })
}

proptest! {
    #[test]
    fn split_then_assemble_is_identity(q in 1usize..5, side in 1usize..6, seed in any::<u64>()) {
        let n = q * side;
        let m = DenseTile::from_fn(n, n, |i, j| (seed as i64).wrapping_add((i * n + j) as i64) as i32);
        let blocks = split_into_blocks(&m, q).unwrap();
        prop_assert_eq!(blocks.len(), q);
        prop_assert!(blocks.iter().all(|r| r.len() == q && r.iter().all(|b| b.rows() == side)));
        prop_assert_eq!(assemble_from_blocks(&blocks).unwrap(), m);
    }

    #[test]
    fn kernel_matches_oracle_on_integers((n, a, b) in int_matrix(12)) {
        let a = DenseTile::new(n, n, a).unwrap();
        let b = DenseTile::new(n, n, b).unwrap();
        let mut c = DenseTile::zeros(n, n);
        local_dot_accumulate(&mut c, &a, &b).unwrap();
        prop_assert_eq!(c, oracle_multiply(&a, &b).unwrap());
    }

    #[test]
    fn accumulation_is_additive((n, a, b) in int_matrix(8)) {
        let a = DenseTile::new(n, n, a).unwrap();
        let b = DenseTile::new(n, n, b).unwrap();
        let once = oracle_multiply(&a, &b).unwrap();
        let mut twice = DenseTile::zeros(n, n);
        local_dot_accumulate(&mut twice, &a, &b).unwrap();
        local_dot_accumulate(&mut twice, &a, &b).unwrap();
        let doubled: Vec<i32> = once.as_slice().iter().map(|x| x.wrapping_mul(2)).collect();
        prop_assert_eq!(twice.as_slice(), &doubled[..]);
    }

    #[test]
    fn blocked_sum_matches_oracle(q in 1usize..4, side in 1usize..5) {
        let n = q * side;
        let a = DenseTile::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as i32 - 5);
        let b = DenseTile::from_fn(n, n, |i, j| ((i * 5 + j * 13) % 17) as i32 - 8);
        let (ab, bb) = (split_into_blocks(&a, q).unwrap(), split_into_blocks(&b, q).unwrap());
        let mut grid = vec![vec![DenseTile::zeros(side, side); q]; q];
        for (i, row) in grid.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                for k in 0..q {
                    local_dot_accumulate(c, &ab[i][k], &bb[k][j]).unwrap();
                }
            }
        }
        prop_assert_eq!(assemble_from_blocks(&grid).unwrap(), oracle_multiply(&a, &b).unwrap());
    }

    #[test]
    fn identity_is_neutral((n, a, _b) in int_matrix(10)) {
        let a = DenseTile::new(n, n, a).unwrap();
        prop_assert_eq!(oracle_multiply(&a, &DenseTile::identity(n)).unwrap(), a.clone());
        prop_assert_eq!(oracle_multiply(&DenseTile::identity(n), &a).unwrap(), a);
    }
}
