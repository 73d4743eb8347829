// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::time::{Duration, Instant};

use cannon::driver::run_typed;
use cannon::{
    generate_matrix, generate_operand, oracle_multiply, reduce_avg, run_baseline_allgather, run_distributed,
    DenseTile, ElementType, Error, FaultPlan, FaultPoint, Implementation, LaunchMode, Operand, RunConfig,
    RunReport, TileF64,
};

fn worker_program() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_cannon"))
}

fn oracle_mean(n: usize, seed: u64) -> f64 {
    let a: TileF64 = generate_operand(n, seed, Operand::A);
    let b: TileF64 = generate_operand(n, seed, Operand::B);
    oracle_multiply(&a, &b).unwrap().sum_f64() / (n * n) as f64
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn generation_is_deterministic_and_uniform() {
    assert_eq!(generate_matrix::<f64>(4, 7), generate_matrix::<f64>(4, 7));
    assert_eq!(generate_matrix::<i32>(1, 3).len(), 1);
    let big: TileF64 = generate_operand(1024, 42, Operand::A);
    let mean = big.sum_f64() / (1024.0 * 1024.0);
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    assert!(big.as_slice().iter().all(|&v| (0.0..1.0).contains(&v)));
    let ints: DenseTile<i32> = generate_operand(64, 42, Operand::B);
    assert!(ints.as_slice().iter().all(|&v| (0..1 << 16).contains(&v)));
}

#[test]
fn avg_reducer() {
    let ones = vec![DenseTile::from_fn(2, 2, |_, _| 1.0f64); 4];
    assert_eq!(reduce_avg(&ones, 2, 4).unwrap(), 1.0);
    let zeros = vec![DenseTile::<f64>::zeros(2, 2); 4];
    assert_eq!(reduce_avg(&zeros, 2, 4).unwrap(), 0.0);
    assert!(matches!(reduce_avg(&ones[..3], 2, 4), Err(Error::Report(_))));
}

#[test]
fn loopback_run_has_one_timing_per_rep_and_oracle_checksum() {
    let mut cfg = RunConfig::new(64, 2);
    cfg.reps = 3;
    cfg.seed = 1;
    let report = run_distributed(&cfg).unwrap();
    assert_eq!(report.reps.len(), 3);
    assert_eq!(report.attempts, 1);
    assert_eq!(report.workers.len(), 4);
    assert!(rel(report.checksum, oracle_mean(64, 1)) <= 1e-12);
}

#[test]
fn single_worker_run_is_local() {
    let mut cfg = RunConfig::new(20, 1);
    cfg.reps = 2;
    cfg.verify = true;
    let report = run_distributed(&cfg).unwrap();
    assert!(report.verification.unwrap().passed);
    assert_eq!(report.workers[0].channels, 0);
    assert_eq!(report.workers[0].transport.transfers, [0; 4]);
}

#[test]
fn invalid_configurations_are_rejected_before_launch() {
    let started = Instant::now();
    assert!(matches!(
        run_distributed(&RunConfig::new(64, 3)),
        Err(Error::GridIncompatible { n: 64, q: 3 })
    ));
    assert!(matches!(
        run_distributed(&RunConfig::new(0, 1)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        run_distributed(&RunConfig::new(4, 0)),
        Err(Error::Config(_))
    ));
    let mut cfg = RunConfig::new(4, 2);
    cfg.reps = 0;
    assert!(matches!(run_distributed(&cfg), Err(Error::Config(_))));
    assert!(started.elapsed() < Duration::from_secs(1));
}

#[test]
fn padding_handles_indivisible_orders() {
    let mut cfg = RunConfig::new(10, 3);
    cfg.pad = true;
    cfg.reps = 1;
    cfg.verify = true;
    cfg.seed = 9;
    let out = run_typed::<f64>(&cfg).unwrap();
    assert_eq!(out.report.padded_n, 12);
    assert_eq!(out.product.rows(), 10);
    assert!(out.report.verification.unwrap().passed);
    assert!(rel(out.report.checksum, oracle_mean(10, 9)) <= 1e-12);
}

#[test]
fn every_element_type_verifies() {
    for dtype in [ElementType::F64, ElementType::F32, ElementType::I32] {
        let mut cfg = RunConfig::new(24, 2);
        cfg.dtype = dtype;
        cfg.reps = 1;
        cfg.verify = true;
        let report = run_distributed(&cfg).unwrap();
        let v = report.verification.unwrap();
        assert!(v.passed, "{dtype:?}: {v:?}");
        if dtype == ElementType::I32 {
            assert_eq!(v.max_rel_err, 0.0);
        }
    }
}

#[test]
fn baseline_agrees_with_cannon() {
    for q in [1, 2, 3] {
        let mut cfg = RunConfig::new(36, q);
        cfg.reps = 1;
        cfg.seed = 3;
        cfg.verify = true;
        let cannon = run_distributed(&cfg).unwrap();
        let base = run_baseline_allgather(&cfg).unwrap();
        assert_eq!(base.implementation, Implementation::Baseline);
        assert!(base.verification.unwrap().passed);
        assert!(rel(base.checksum, cannon.checksum) <= 1e-12, "q={q}");
    }
}

#[test]
fn baseline_memory_grows_while_cannon_stays_flat() {
    let tile = 16usize;
    let mut cannon = Vec::new();
    let mut base = Vec::new();
    for q in 1..=4 {
        let mut cfg = RunConfig::new(tile * q, q);
        cfg.reps = 1;
        cannon.push(run_distributed(&cfg).unwrap().peak_worker_bytes());
        base.push(run_baseline_allgather(&cfg).unwrap().peak_worker_bytes());
    }
    let bytes = tile * tile * 8;
    assert_eq!(cannon, vec![3 * bytes; 4]);
    assert_eq!(base, (1..=4).map(|q| (2 * q + 1) * bytes).collect::<Vec<_>>());
}

#[test]
fn scatter_delay_is_excluded_from_timings() {
    let delay = Duration::from_millis(400);
    let mut cfg = RunConfig::new(32, 2);
    cfg.reps = 2;
    cfg.scatter_delay = delay;
    let started = Instant::now();
    let report = run_distributed(&cfg).unwrap();
    assert!(started.elapsed() >= delay * 2, "delay was not applied");
    for r in &report.reps {
        assert!(r.dot_ms < 200.0, "rep {} took {} ms", r.rep, r.dot_ms);
    }
}

#[test]
fn threads_mode_restarts_after_injected_fault() {
    let mut cfg = RunConfig::new(16, 2);
    cfg.reps = 1;
    cfg.verify = true;
    cfg.fault = Some(FaultPlan {
        rank: 2,
        attempt: Some(0),
        point: FaultPoint::MidRun,
    });
    let report = run_distributed(&cfg).unwrap();
    assert_eq!(report.attempts, 2);
    assert_eq!(report.failures.len(), 1);
    assert!(report.verification.unwrap().passed);
}

#[test]
fn processes_mode_matches_oracle() {
    let mut cfg = RunConfig::new(32, 2);
    cfg.mode = LaunchMode::Processes;
    cfg.worker_program = Some(worker_program());
    cfg.reps = 2;
    cfg.seed = 5;
    cfg.verify = true;
    let report = run_distributed(&cfg).unwrap();
    assert_eq!(report.mode, LaunchMode::Processes);
    assert!(report.verification.as_ref().unwrap().passed);
    assert!(rel(report.checksum, oracle_mean(32, 5)) <= 1e-12);
    assert_eq!(report.workers.len(), 4);
    assert!(report
        .workers
        .iter()
        .all(|w| w.peak_rss_bytes.is_some_and(|b| b > 0)));
}

#[test]
fn processes_mode_restarts_the_whole_gang() {
    let mut cfg = RunConfig::new(16, 2);
    cfg.mode = LaunchMode::Processes;
    cfg.worker_program = Some(worker_program());
    cfg.reps = 1;
    cfg.verify = true;
    cfg.fault = Some(FaultPlan {
        rank: 1,
        attempt: Some(0),
        point: FaultPoint::BeforeBarrier,
    });
    let report = run_distributed(&cfg).unwrap();
    assert_eq!(report.attempts, 2);
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].contains("rank 1"), "{:?}", report.failures);
    assert!(report.verification.unwrap().passed);
}

#[test]
fn processes_mode_gives_up_on_persistent_fault() {
    let mut cfg = RunConfig::new(16, 2);
    cfg.mode = LaunchMode::Processes;
    cfg.worker_program = Some(worker_program());
    cfg.reps = 1;
    cfg.max_restarts = 1;
    cfg.fault = Some(FaultPlan {
        rank: 3,
        attempt: None,
        point: FaultPoint::MidRun,
    });
    match run_distributed(&cfg) {
        Err(Error::GangFailed { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn report_round_trips_and_csv_has_fixed_columns() {
    let mut cfg = RunConfig::new(8, 2);
    cfg.reps = 3;
    let report = run_distributed(&cfg).unwrap();
    let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back.to_json().unwrap(), report.to_json().unwrap());
    let csv = report.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "impl,n,q,p,dtype,rep,dot_ms,peak_worker_bytes,checksum,attempts"
    );
    assert_eq!(lines.count(), 3);
}
