// SPDX-License-Identifier: Apache-2.0

use cannon::barrier::{run_gang, GangConfig};
use cannon::cannon::{dot_product, dot_product_any, CannonPlan, DotOptions};
use cannon::driver::run_typed;
use cannon::{
    assemble_from_blocks, generate_operand, oracle_multiply, split_into_blocks, AnyTile, DenseTile, Element,
    ElementType, Error, Operand, RunConfig, TileF64,
};

/// Runs Cannon on `a * b` with `q*q` worker threads and gathers `C`.
fn gang_product<T: Element>(a: &DenseTile<T>, b: &DenseTile<T>, q: usize, opts: DotOptions) -> DenseTile<T> {
    let ab = split_into_blocks(a, q).unwrap();
    let bb = split_into_blocks(b, q).unwrap();
    let run = run_gang(&GangConfig::new(q * q), |s| {
        let (i, j) = (s.rank() / q, s.rank() % q);
        let (mut x, mut y) = (ab[i][j].clone(), bb[i][j].clone());
        let (c, stats) = dot_product(s, &mut x, &mut y, opts)?;
        Ok((c, x, y, stats))
    })
    .unwrap();
    assert_eq!(run.attempt, 0);
    let mut grid: Vec<Vec<DenseTile<T>>> = vec![Vec::new(); q];
    for (r, (c, x, y, _)) in run.results.into_iter().enumerate() {
        if opts.unskew {
            assert_eq!(x, ab[r / q][r % q], "A restored on rank {r}");
            assert_eq!(y, bb[r / q][r % q], "B restored on rank {r}");
        }
        grid[r / q].push(c);
    }
    assemble_from_blocks(&grid).unwrap()
}

fn max_rel_err(got: &TileF64, want: &TileF64) -> f64 {
    got.as_slice()
        .iter()
        .zip(want.as_slice())
        .map(|(g, w)| if g == w { 0.0 } else { (g - w).abs() / w.abs() })
        .fold(0.0, f64::max)
}

#[test]
fn two_by_two_on_four_workers() {
    let a = DenseTile::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = DenseTile::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let c = gang_product(&a, &b, 2, DotOptions::default());
    assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn single_worker_equals_oracle_exactly() {
    let a: TileF64 = generate_operand(9, 3, Operand::A);
    let b: TileF64 = generate_operand(9, 3, Operand::B);
    let c = gang_product(&a, &b, 1, DotOptions::default());
    assert_eq!(c, oracle_multiply(&a, &b).unwrap());
}

#[test]
fn identity_times_m_on_four_workers() {
    let m: TileF64 = generate_operand(8, 11, Operand::B);
    let c = gang_product(&TileF64::identity(8), &m, 2, DotOptions::default());
    assert_eq!(c, m);
}

#[test]
fn seeded_random_matches_oracle_on_grids() {
    for (n, q) in [(4, 2), (6, 2), (12, 2), (60, 2), (6, 3), (12, 3), (60, 3)] {
        let a: TileF64 = generate_operand(n, 17, Operand::A);
        let b: TileF64 = generate_operand(n, 17, Operand::B);
        let c = gang_product(&a, &b, q, DotOptions::default());
        let err = max_rel_err(&c, &oracle_multiply(&a, &b).unwrap());
        assert!(err <= 1e-12 * n as f64, "n={n} q={q} err={err}");
    }
}

#[test]
fn int32_is_exact_and_wraps() {
    let a: DenseTile<i32> = generate_operand(12, 2, Operand::A);
    let b: DenseTile<i32> = generate_operand(12, 2, Operand::B);
    // entries near 2^16 make 12-term sums overflow i32; both must wrap alike
    let c = gang_product(&a, &b, 3, DotOptions::default());
    assert_eq!(c, oracle_multiply(&a, &b).unwrap());
}

#[test]
fn grid_invariance_and_determinism() {
    let n = 24;
    let a: TileF64 = generate_operand(n, 5, Operand::A);
    let b: TileF64 = generate_operand(n, 5, Operand::B);
    let want = oracle_multiply(&a, &b).unwrap();
    for q in [1, 2, 3, 4] {
        let first = gang_product(&a, &b, q, DotOptions::default());
        let again = gang_product(&a, &b, q, DotOptions::default());
        assert_eq!(first, again, "q={q} not bit-identical across runs");
        assert!(max_rel_err(&first, &want) <= 1e-12 * n as f64);
    }
}

#[test]
fn unskew_restores_inputs() {
    let a: TileF64 = generate_operand(12, 8, Operand::A);
    let b: TileF64 = generate_operand(12, 8, Operand::B);
    let c = gang_product(&a, &b, 3, DotOptions { unskew: true });
    assert!(max_rel_err(&c, &oracle_multiply(&a, &b).unwrap()) <= 1e-10);
}

/// Every block of A holds its own block coordinates, so after alignment
/// a worker's tile names the block it received.
#[test]
fn label_matrix_alignment_q3() {
    let q = 3;
    let a = DenseTile::from_fn(q, q, |i, j| (10 * i + j) as f64);
    let b = a.clone();
    let ab = split_into_blocks(&a, q).unwrap();
    let bb = split_into_blocks(&b, q).unwrap();
    let run = run_gang(&GangConfig::new(q * q), |s| {
        let (i, j) = (s.rank() / q, s.rank() % q);
        let plan = CannonPlan::new(q * q, s.rank(), 1, ElementType::F64, 0)?;
        // alignment through the public path, then read what landed here
        let (mut x, mut y) = (ab[i][j].clone(), bb[i][j].clone());
        let mut mesh = cannon::establish_mesh(
            &cannon::transport::MeshSetup {
                rank: s.rank(),
                attempt: 0,
                hosts: &s.ctx.host_map,
                timeouts: s.ctx.timeouts,
                cancel: None,
            },
            &s.listener,
            &plan.neighbors(),
            None,
        )?;
        let mut counters = Default::default();
        cannon::cannon::skew(&plan, &mut mesh, &mut x, &mut y, &mut counters)?;
        mesh.drain()?;
        Ok((x.get(0, 0), y.get(0, 0)))
    })
    .unwrap();
    for (r, (x, y)) in run.results.into_iter().enumerate() {
        let (i, j) = (r / q, r % q);
        let k = (i + j) % q;
        assert_eq!(x, (10 * i + k) as f64, "A block on ({i},{j})");
        assert_eq!(y, (10 * k + j) as f64, "B block on ({i},{j})");
    }
}

#[test]
fn communication_counts_per_worker() {
    for q in [2usize, 3, 4] {
        let n = 12;
        let a: TileF64 = generate_operand(n, 1, Operand::A);
        let b: TileF64 = generate_operand(n, 1, Operand::B);
        let ab = split_into_blocks(&a, q).unwrap();
        let bb = split_into_blocks(&b, q).unwrap();
        let run = run_gang(&GangConfig::new(q * q), |s| {
            let (i, j) = (s.rank() / q, s.rank() % q);
            let (mut x, mut y) = (ab[i][j].clone(), bb[i][j].clone());
            dot_product(s, &mut x, &mut y, DotOptions::default()).map(|(_, st)| st)
        })
        .unwrap();
        for (r, st) in run.results.iter().enumerate() {
            let (i, j) = (r / q, r % q);
            let q = q as u64;
            assert_eq!(st.comm.a_transfers(), (i > 0) as u64 + q - 1);
            assert_eq!(st.comm.b_transfers(), (j > 0) as u64 + q - 1);
            assert_eq!(st.transport.transfers[0], st.comm.a_transfers());
            assert_eq!(st.transport.transfers[1], st.comm.b_transfers());
            assert_eq!(st.channels, 2 * (q as usize - 1));
        }
    }
}

#[test]
fn non_square_gang_is_config_error() {
    let run = run_gang(&GangConfig::new(2), |s| {
        let mut a = TileF64::identity(2);
        let mut b = TileF64::identity(2);
        dot_product(s, &mut a, &mut b, DotOptions::default()).map(|_| ())
    });
    assert!(matches!(run, Err(Error::Config(_))), "{:?}", run.err());
}

#[test]
fn mixed_element_types_rejected() {
    let run = run_gang(&GangConfig::new(1), |s| {
        let mut a: AnyTile = TileF64::identity(2).into();
        let mut b: AnyTile = DenseTile::<i32>::identity(2).into();
        dot_product_any(s, &mut a, &mut b, DotOptions::default()).map(|_| ())
    });
    assert!(run.is_err());
}

#[test]
fn driver_threads_run_matches_oracle() {
    let mut cfg = RunConfig::new(64, 2);
    cfg.reps = 3;
    cfg.seed = 4;
    cfg.verify = true;
    let out = run_typed::<f64>(&cfg).unwrap();
    assert_eq!(out.report.reps.len(), 3);
    assert!(out.report.verification.as_ref().unwrap().passed);
    let a: TileF64 = generate_operand(64, 4, Operand::A);
    let b: TileF64 = generate_operand(64, 4, Operand::B);
    let want = oracle_multiply(&a, &b).unwrap();
    let mean = want.sum_f64() / (64.0 * 64.0);
    assert!((out.report.checksum - mean).abs() <= 1e-12 * mean);
}
