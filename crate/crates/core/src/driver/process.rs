// SPDX-License-Identifier: Apache-2.0

//! Processes mode: one child process per worker.
//!
//! The driver runs the barrier coordinator and supervises the children.
//! Each child generates its own blocks from the seed, runs the repetitions,
//! writes its last product block as raw little-endian bytes to a file and
//! prints its metrics as one JSON line on stdout.

use std::ffi::OsString;
use std::fs;
use std::io::Read;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use super::{
    generate_block, run_worker, Gathered, Implementation, Operand, RunConfig, WorkerJob, WorkerMetrics,
};
use crate::barrier::{
    BarrierOutcome, Coordinator, FaultPlan, FaultPoint, GangVerdict, WorkerContext, WorkerSession,
};
use crate::error::{Error, Result};
use crate::meter::{process_cpu_ms, process_peak_rss};
use crate::scalar::{Element, ElementType};
use crate::tile::DenseTile;
use crate::transport::{HostMap, Timeouts};

/// How long a failed attempt's survivors get to notice before being killed.
const FAILURE_GRACE: Duration = Duration::from_millis(500);

/// Everything a worker process needs, passed on its command line.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerSpec {
    pub rank: usize,
    pub q: usize,
    pub n: usize,
    pub pad: bool,
    pub dtype: ElementType,
    pub seed: u64,
    pub reps: usize,
    pub implementation: Implementation,
    pub hosts_file: PathBuf,
    pub coordinator: Option<SocketAddr>,
    pub attempt: u32,
    pub block_out: PathBuf,
    pub fault: Option<FaultPlan>,
    pub scatter_delay: Duration,
    pub timeouts: Timeouts,
}

fn fault_spec(f: &FaultPlan) -> String {
    let mut s = f.rank.to_string();
    if let Some(a) = f.attempt {
        s.push_str(&format!(":{a}"));
    }
    s.push_str(match f.point {
        FaultPoint::BeforeBarrier => "@barrier",
        FaultPoint::MidRun => "@mid",
    });
    s
}

impl WorkerSpec {
    /// Arguments for the `worker` subcommand, subcommand name included.
    pub fn to_args(&self) -> Vec<OsString> {
        let mut v: Vec<OsString> = vec!["worker".into()];
        let mut push = |k: &str, val: String| {
            v.push(k.into());
            v.push(val.into());
        };
        push("--rank", self.rank.to_string());
        push("--grid", self.q.to_string());
        push("--n", self.n.to_string());
        push("--dtype", self.dtype.name().into());
        push("--seed", self.seed.to_string());
        push("--reps", self.reps.to_string());
        push("--impl", self.implementation.name().into());
        push("--attempt", self.attempt.to_string());
        push("--scatter-delay-ms", self.scatter_delay.as_millis().to_string());
        push(
            "--connect-timeout-ms",
            self.timeouts.connect.as_millis().to_string(),
        );
        push("--io-timeout-ms", self.timeouts.io.as_millis().to_string());
        push(
            "--barrier-timeout-ms",
            self.timeouts.barrier.as_millis().to_string(),
        );
        if let Some(c) = self.coordinator {
            push("--coordinator", c.to_string());
        }
        if let Some(f) = &self.fault {
            push("--fault", fault_spec(f));
        }
        v.push("--hosts".into());
        v.push(self.hosts_file.clone().into());
        v.push("--block-out".into());
        v.push(self.block_out.clone().into());
        if self.pad {
            v.push("--pad".into());
        }
        v
    }
}

/// Body of a worker process. Returns the metrics to print.
pub fn worker_main(spec: &WorkerSpec) -> Result<WorkerMetrics> {
    match spec.dtype {
        ElementType::F64 => worker_typed::<f64>(spec),
        ElementType::F32 => worker_typed::<f32>(spec),
        ElementType::I32 => worker_typed::<i32>(spec),
    }
}

fn worker_typed<T: Element>(spec: &WorkerSpec) -> Result<WorkerMetrics> {
    let hosts = HostMap::load(&spec.hosts_file)?;
    let mut cfg = RunConfig::new(spec.n, spec.q);
    cfg.pad = spec.pad;
    cfg.reps = spec.reps;
    cfg.hosts = Some(hosts.clone());
    let n_eff = cfg.validate()?;
    let addr = hosts.address(spec.rank)?.to_string();
    let listener = TcpListener::bind(&addr)
        .map_err(|e| Error::Setup(format!("rank {} cannot listen on {addr}: {e}", spec.rank)))?;
    let ctx = WorkerContext::new(spec.rank, hosts, spec.attempt, spec.coordinator)?
        .with_timeouts(spec.timeouts)
        .with_fault(spec.fault);
    let mut session = WorkerSession::open(ctx, listener)?;

    let s = n_eff / spec.q;
    let (i, j) = (spec.rank / spec.q, spec.rank % spec.q);
    let job = WorkerJob {
        implementation: spec.implementation,
        reps: spec.reps,
        scatter_delay: spec.scatter_delay,
    };
    let out = run_worker(&mut session, &job, || {
        (
            generate_block::<T>(spec.n, spec.seed, Operand::A, i * s, j * s, s),
            generate_block::<T>(spec.n, spec.seed, Operand::B, i * s, j * s, s),
        )
    });
    let (c, mut metrics) = match out {
        Ok(v) => v,
        Err(e) => {
            session.fail(&e);
            return Err(e);
        }
    };
    let mut bytes = vec![0u8; c.byte_len()];
    T::write_le(c.as_slice(), &mut bytes);
    fs::write(&spec.block_out, bytes)
        .map_err(|e| Error::Report(format!("{}: {e}", spec.block_out.display())))?;
    metrics.peak_rss_bytes = process_peak_rss();
    metrics.cpu_ms = process_cpu_ms();
    Ok(metrics)
}

fn worker_hosts(cfg: &RunConfig) -> Result<HostMap> {
    if let Some(h) = &cfg.hosts {
        return Ok(h.clone());
    }
    let p = cfg.p();
    match cfg.port_base {
        Some(base) => {
            if base as usize + p >= u16::MAX as usize {
                return Err(Error::Config(format!(
                    "port base {base} too high for {p} workers"
                )));
            }
            HostMap::new(
                (0..p)
                    .map(|r| format!("127.0.0.1:{}", base as usize + 1 + r))
                    .collect(),
            )
        }
        None => {
            // reserve distinct ephemeral ports, then hand them to the children
            let probes: Vec<TcpListener> = (0..p)
                .map(|_| TcpListener::bind("127.0.0.1:0"))
                .collect::<std::io::Result<_>>()?;
            let addrs: Vec<SocketAddr> = probes
                .iter()
                .map(TcpListener::local_addr)
                .collect::<std::io::Result<_>>()?;
            HostMap::from_socket_addrs(&addrs)
        }
    }
}

struct Supervised {
    children: Vec<Child>,
    status: Vec<Option<ExitStatus>>,
}

impl Supervised {
    fn poll(&mut self) -> Result<Option<usize>> {
        let mut first_failure = None;
        for (r, c) in self.children.iter_mut().enumerate() {
            if self.status[r].is_none() {
                if let Some(s) = c.try_wait()? {
                    self.status[r] = Some(s);
                    if !s.success() && first_failure.is_none() {
                        first_failure = Some(r);
                    }
                }
            }
        }
        Ok(first_failure)
    }

    fn all_exited(&self) -> bool {
        self.status.iter().all(Option::is_some)
    }

    fn kill_rest(&mut self) {
        for (r, c) in self.children.iter_mut().enumerate() {
            if self.status[r].is_none() {
                let _ = c.kill();
                self.status[r] = c.wait().ok();
            }
        }
    }
}

impl Drop for Supervised {
    fn drop(&mut self) {
        self.kill_rest();
    }
}

type AttemptResult<T> = std::result::Result<(Vec<DenseTile<T>>, Vec<WorkerMetrics>), String>;

fn run_attempt<T: Element>(
    cfg: &RunConfig,
    n_eff: usize,
    program: &Path,
    dir: &Path,
    attempt: u32,
) -> Result<AttemptResult<T>> {
    let p = cfg.p();
    let hosts = worker_hosts(cfg)?;
    let hosts_file = dir.join(format!("hosts-{attempt}.txt"));
    fs::write(&hosts_file, hosts.to_text())?;
    let coordinator = if p > 1 {
        let addr = cfg
            .port_base
            .filter(|_| cfg.hosts.is_none())
            .map_or("127.0.0.1:0".to_string(), |b| format!("127.0.0.1:{b}"));
        Some(Coordinator::bind(&addr, p, attempt, cfg.timeouts)?)
    } else {
        None
    };
    let coord_addr = coordinator.as_ref().map(Coordinator::addr);

    let mut sup = Supervised {
        children: Vec::with_capacity(p),
        status: vec![None; p],
    };
    for rank in 0..p {
        let spec = WorkerSpec {
            rank,
            q: cfg.q,
            n: cfg.n,
            pad: cfg.pad,
            dtype: cfg.dtype,
            seed: cfg.seed,
            reps: cfg.reps,
            implementation: cfg.implementation,
            hosts_file: hosts_file.clone(),
            coordinator: coord_addr,
            attempt,
            block_out: dir.join(format!("block-{attempt}-{rank}.bin")),
            fault: cfg.fault,
            scatter_delay: cfg.scatter_delay,
            timeouts: cfg.timeouts,
        };
        let child = Command::new(program)
            .args(spec.to_args())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn();
        match child {
            Ok(c) => sup.children.push(c),
            Err(e) => {
                if let Some(c) = &coordinator {
                    c.abort();
                }
                return Err(Error::Launch(format!(
                    "cannot start worker {rank} from {}: {e}",
                    program.display()
                )));
            }
        }
    }

    let mut coordinator = coordinator;
    let mut verdict: Option<GangVerdict> = None;
    let mut failed: Option<(Instant, Option<usize>)> = None;
    loop {
        if let Some(r) = sup.poll()? {
            failed.get_or_insert((Instant::now(), Some(r)));
        }
        if coordinator.as_ref().is_some_and(Coordinator::is_finished) {
            let v = coordinator.take().expect("checked").wait();
            if matches!(v, GangVerdict::Failed(_)) {
                failed.get_or_insert((Instant::now(), None));
            }
            verdict = Some(v);
        }
        if sup.all_exited() && coordinator.is_none() {
            break;
        }
        if let Some((since, _)) = failed {
            if verdict.is_some() || since.elapsed() > FAILURE_GRACE {
                sup.kill_rest();
                if let Some(c) = coordinator.take() {
                    c.abort();
                    verdict = Some(c.wait());
                }
                break;
            }
        }
        thread::sleep(Duration::from_millis(5));
    }

    let cause = match (&verdict, failed) {
        (Some(GangVerdict::Failed(o)), _) => Some(o.to_string()),
        (_, Some((_, Some(r)))) => Some(format!(
            "rank {r} exited with {}",
            sup.status[r].map_or("unknown status".into(), |s| s.to_string())
        )),
        (_, Some((_, None))) => Some(BarrierOutcome::TimedOut.to_string()),
        _ => None,
    };
    if let Some(cause) = cause {
        return Ok(Err(cause));
    }

    let s = n_eff / cfg.q;
    let mut blocks = Vec::with_capacity(p);
    let mut metrics = Vec::with_capacity(p);
    for (rank, child) in sup.children.iter_mut().enumerate() {
        let mut out = String::new();
        if let Some(mut pipe) = child.stdout.take() {
            pipe.read_to_string(&mut out)?;
        }
        let line = out.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let m: WorkerMetrics = serde_json::from_str(line)
            .map_err(|e| Error::Launch(format!("worker {rank} printed no metrics: {e}")))?;
        metrics.push(m);
        let path = dir.join(format!("block-{attempt}-{rank}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::Launch(format!("{}: {e}", path.display())))?;
        if bytes.len() != s * s * T::WIDTH {
            return Err(Error::Launch(format!(
                "worker {rank} wrote {} bytes, expected {}",
                bytes.len(),
                s * s * T::WIDTH
            )));
        }
        let mut data = vec![T::zero(); s * s];
        T::read_le(&bytes, &mut data);
        blocks.push(DenseTile::new(s, s, data)?);
    }
    Ok(Ok((blocks, metrics)))
}

pub(crate) fn run_processes<T: Element>(cfg: &RunConfig, n_eff: usize) -> Result<Gathered<T>> {
    let program = match &cfg.worker_program {
        Some(p) => p.clone(),
        None => std::env::current_exe()?,
    };
    let dir = tempfile::tempdir()?;
    let mut failures = Vec::new();
    for attempt in 0..=cfg.max_restarts {
        match run_attempt::<T>(cfg, n_eff, &program, dir.path(), attempt)? {
            Ok((blocks, metrics)) => {
                if attempt > 0 {
                    info!("processes gang succeeded on attempt {attempt}");
                }
                return Ok(Gathered {
                    blocks,
                    metrics,
                    attempt,
                    failures,
                });
            }
            Err(cause) => {
                warn!("processes gang attempt {attempt} failed: {cause}");
                failures.push(cause);
            }
        }
    }
    Err(Error::GangFailed {
        attempts: cfg.max_restarts + 1,
        cause: failures.last().cloned().unwrap_or_default(),
    })
}
