// SPDX-License-Identifier: Apache-2.0

use std::thread;
use std::time::{Duration, Instant};

use cannon::barrier::{run_gang, GangConfig, GangVerdict};
use cannon::transport::{AbortReason, Timeouts};
use cannon::{
    BarrierClient, BarrierOutcome, Coordinator, Error, FaultPlan, FaultPoint, HostMap, WorkerContext,
};

fn timeouts(barrier_ms: u64) -> Timeouts {
    Timeouts {
        connect: Duration::from_secs(10),
        io: Duration::from_secs(10),
        barrier: Duration::from_millis(barrier_ms),
    }
}

fn fake_hosts(p: usize) -> HostMap {
    HostMap::new((0..p).map(|r| format!("127.0.0.1:{}", 40000 + r)).collect()).unwrap()
}

/// Starts a coordinator for `p` clients and runs `body` on each client.
fn with_clients<R: Send>(
    p: usize,
    attempt: u32,
    t: Timeouts,
    body: impl Fn(usize, &mut BarrierClient) -> R + Sync,
) -> (Vec<R>, GangVerdict) {
    let coord = Coordinator::start(p, attempt, t).unwrap();
    let addr = coord.addr();
    let hosts = fake_hosts(p);
    let out = thread::scope(|s| {
        let hs: Vec<_> = (0..p)
            .map(|r| {
                let (hosts, body) = (&hosts, &body);
                s.spawn(move || {
                    let ctx = WorkerContext::new(r, hosts.clone(), attempt, Some(addr))
                        .unwrap()
                        .with_timeouts(t);
                    let mut c = BarrierClient::connect(&ctx).unwrap();
                    body(r, &mut c)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    (out, coord.wait())
}

#[test]
fn single_worker_needs_no_coordinator() {
    let ctx = WorkerContext::new(0, fake_hosts(1), 0, None).unwrap();
    let mut c = BarrierClient::connect(&ctx).unwrap();
    for e in 0..5 {
        assert_eq!(c.barrier(e).unwrap(), BarrierOutcome::Released);
    }
}

#[test]
fn multi_worker_context_requires_coordinator() {
    assert!(matches!(
        WorkerContext::new(0, fake_hosts(2), 0, None),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        WorkerContext::new(2, fake_hosts(2), 0, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn nobody_leaves_before_the_last_arrival() {
    let start = Instant::now();
    let (out, verdict) = with_clients(4, 0, timeouts(10_000), |r, c| {
        let mut releases = Vec::new();
        for e in 0..3 {
            thread::sleep(Duration::from_millis(40 * r as u64));
            let outcome = c.barrier(e).unwrap();
            releases.push((outcome, start.elapsed()));
        }
        releases
    });
    for e in 0..3 {
        // the last worker has slept 120 ms per epoch by the time it arrives
        let floor = Duration::from_millis(120 * (e as u64 + 1));
        for rel in &out {
            assert_eq!(rel[e].0, BarrierOutcome::Released);
            assert!(rel[e].1 >= floor, "epoch {e} released after {:?}", rel[e].1);
        }
    }
    assert_eq!(verdict, GangVerdict::Completed { barriers: 3 });
}

#[test]
fn failure_is_reported_to_every_waiter_with_rank() {
    let (out, verdict) = with_clients(4, 0, timeouts(10_000), |r, c| {
        if r == 2 {
            c.report_failure(AbortReason::Injected);
        }
        c.barrier(0).unwrap()
    });
    let want = BarrierOutcome::Aborted {
        rank: Some(2),
        reason: AbortReason::Injected,
    };
    assert!(out.iter().all(|o| *o == want), "{out:?}");
    assert_eq!(verdict, GangVerdict::Failed(want));
}

#[test]
fn missing_worker_times_out() {
    let started = Instant::now();
    let (out, verdict) = with_clients(3, 0, timeouts(300), |r, c| {
        if r == 0 {
            // never arrives, but holds its connection until the others gave up
            thread::sleep(Duration::from_millis(900));
            BarrierOutcome::TimedOut
        } else {
            c.barrier(0).unwrap()
        }
    });
    assert!(out.iter().all(|o| *o == BarrierOutcome::TimedOut), "{out:?}");
    assert_eq!(verdict, GangVerdict::Failed(BarrierOutcome::TimedOut));
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn departed_worker_aborts_the_barrier() {
    let (out, _) = with_clients(3, 0, timeouts(10_000), |r, c| {
        if r == 1 {
            None
        } else {
            Some(c.barrier(0).unwrap())
        }
    });
    for o in out.into_iter().flatten() {
        assert_eq!(
            o,
            BarrierOutcome::Aborted {
                rank: Some(1),
                reason: AbortReason::Disconnect
            }
        );
    }
}

#[test]
fn double_arrival_is_a_protocol_error() {
    let ctx = WorkerContext::new(0, fake_hosts(1), 0, None).unwrap();
    let mut c = BarrierClient::connect(&ctx).unwrap();
    c.barrier(3).unwrap();
    assert!(matches!(c.barrier(3), Err(Error::Protocol(_))));
    assert!(matches!(c.barrier(2), Err(Error::Protocol(_))));

    let (out, verdict) = with_clients(2, 0, timeouts(10_000), |r, c| {
        if r == 0 {
            c.send_raw_arrival(0).unwrap();
            c.send_raw_arrival(0).unwrap();
        }
        c.barrier(1).unwrap()
    });
    let want = BarrierOutcome::Aborted {
        rank: Some(0),
        reason: AbortReason::Protocol,
    };
    assert!(out.iter().all(|o| *o == want), "{out:?}");
    assert_eq!(verdict, GangVerdict::Failed(want));
}

#[test]
fn stale_attempt_cannot_join() {
    let t = timeouts(5_000);
    let coord = Coordinator::start(2, 1, t).unwrap();
    let addr = coord.addr();
    let hosts = fake_hosts(2);
    // a leftover worker from attempt 0 is refused
    let stale_ctx = WorkerContext::new(0, hosts.clone(), 0, Some(addr))
        .unwrap()
        .with_timeouts(t);
    let mut stale = BarrierClient::connect(&stale_ctx).unwrap();
    assert_ne!(stale.barrier(0).unwrap(), BarrierOutcome::Released);

    let out: Vec<_> = thread::scope(|s| {
        let hs: Vec<_> = (0..2)
            .map(|r| {
                let hosts = hosts.clone();
                s.spawn(move || {
                    let ctx = WorkerContext::new(r, hosts, 1, Some(addr))
                        .unwrap()
                        .with_timeouts(t);
                    BarrierClient::connect(&ctx).unwrap().barrier(0).unwrap()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(out.iter().all(|o| *o == BarrierOutcome::Released));
    assert_eq!(coord.wait(), GangVerdict::Completed { barriers: 1 });
}

#[test]
fn external_abort_releases_waiters() {
    let t = timeouts(30_000);
    let coord = Coordinator::start(2, 0, t).unwrap();
    let addr = coord.addr();
    let hosts = fake_hosts(2);
    let waiter = thread::spawn({
        let hosts = hosts.clone();
        move || {
            let ctx = WorkerContext::new(0, hosts, 0, Some(addr))
                .unwrap()
                .with_timeouts(t);
            BarrierClient::connect(&ctx).unwrap().barrier(0).unwrap()
        }
    });
    let ctx = WorkerContext::new(1, hosts, 0, Some(addr))
        .unwrap()
        .with_timeouts(t);
    let _idle = BarrierClient::connect(&ctx).unwrap();
    thread::sleep(Duration::from_millis(100));
    let started = Instant::now();
    coord.abort();
    assert!(matches!(
        waiter.join().unwrap(),
        BarrierOutcome::Aborted { rank: None, .. }
    ));
    assert!(started.elapsed() < Duration::from_secs(2));
    assert!(matches!(coord.wait(), GangVerdict::Failed(_)));
}

#[test]
fn gang_success_on_first_attempt() {
    let run = run_gang(&GangConfig::new(4), |s| {
        s.barrier.barrier_next()?;
        s.barrier.barrier_next()?;
        Ok(s.rank() * 10)
    })
    .unwrap();
    assert_eq!(run.results, vec![0, 10, 20, 30]);
    assert_eq!(run.attempt, 0);
    assert!(run.failures.is_empty());
}

#[test]
fn gang_restarts_after_one_failed_attempt() {
    let mut cfg = GangConfig::new(4);
    cfg.fault = Some(FaultPlan {
        rank: 1,
        attempt: Some(0),
        point: FaultPoint::BeforeBarrier,
    });
    let run = run_gang(&cfg, |s| {
        s.ctx.check_fault(FaultPoint::BeforeBarrier)?;
        s.barrier.barrier_next()?;
        Ok(s.ctx.attempt)
    })
    .unwrap();
    assert_eq!(run.attempt, 1);
    assert_eq!(run.results, vec![1; 4]);
    assert_eq!(run.failures.len(), 1);
    assert!(run.failures[0].contains("rank 1"), "{}", run.failures[0]);
}

#[test]
fn gang_gives_up_after_max_restarts() {
    let mut cfg = GangConfig::new(4);
    cfg.max_restarts = 2;
    cfg.fault = Some(FaultPlan {
        rank: 3,
        attempt: None,
        point: FaultPoint::BeforeBarrier,
    });
    let err = run_gang(&cfg, |s| {
        s.ctx.check_fault(FaultPoint::BeforeBarrier)?;
        s.barrier.barrier_next()
    })
    .unwrap_err();
    match err {
        Error::GangFailed { attempts, cause } => {
            assert_eq!(attempts, 3);
            assert!(cause.contains("rank 3"), "{cause}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn configuration_errors_are_not_retried() {
    let mut cfg = GangConfig::new(2);
    cfg.max_restarts = 5;
    let calls = std::sync::atomic::AtomicUsize::new(0);
    let err = run_gang(&cfg, |_| -> cannon::Result<()> {
        calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Err(Error::Config("bad".into()))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
}
