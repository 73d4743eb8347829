// SPDX-License-Identifier: Apache-2.0

//! Run orchestration: generation, scatter, gang launch, gather, checksum.

mod baseline;
mod generate;
mod process;
mod report;
mod worker;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use baseline::allgather_product;
pub use generate::{generate_block, generate_matrix, generate_operand, Operand};
pub use process::{worker_main, WorkerSpec};
pub use report::{RepRecord, RunReport, Verification};
pub use worker::{run_worker, RepMetrics, WorkerJob, WorkerMetrics};

use crate::barrier::{run_gang, FaultPlan, GangConfig};
use crate::error::{Error, Result};
use crate::scalar::{Element, ElementType};
use crate::tile::{assemble_from_blocks, oracle_multiply, split_into_blocks, DenseTile};
use crate::transport::{HostMap, Timeouts};

/// Which distributed multiply to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Implementation {
    Cannon,
    Baseline,
}

impl Implementation {
    pub fn name(self) -> &'static str {
        match self {
            Implementation::Cannon => "cannon",
            Implementation::Baseline => "baseline",
        }
    }
}

/// Where the workers run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaunchMode {
    /// One thread per worker, loopback sockets.
    Threads,
    /// One child process per worker.
    Processes,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub n: usize,
    pub q: usize,
    pub dtype: ElementType,
    pub seed: u64,
    pub reps: usize,
    pub mode: LaunchMode,
    pub implementation: Implementation,
    /// Worker addresses for processes mode; loopback ports otherwise.
    pub hosts: Option<HostMap>,
    pub verify: bool,
    /// Zero-pad `n` up to a multiple of `q` instead of rejecting it.
    pub pad: bool,
    /// Sleep inside each worker before every multiply, outside the timed span.
    pub scatter_delay: Duration,
    pub fault: Option<FaultPlan>,
    pub max_restarts: u32,
    pub timeouts: Timeouts,
    pub port_base: Option<u16>,
    /// Executable providing the `worker` subcommand; the current one if unset.
    pub worker_program: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(n: usize, q: usize) -> Self {
        RunConfig {
            n,
            q,
            dtype: ElementType::F64,
            seed: 0,
            reps: 10,
            mode: LaunchMode::Threads,
            implementation: Implementation::Cannon,
            hosts: None,
            verify: false,
            pad: false,
            scatter_delay: Duration::ZERO,
            fault: None,
            max_restarts: 3,
            timeouts: Timeouts::default(),
            port_base: None,
            worker_program: None,
        }
    }

    pub fn p(&self) -> usize {
        self.q * self.q
    }

    /// Matrix order actually distributed: `n`, or `n` rounded up to a
    /// multiple of `q` when padding.
    pub fn effective_n(&self) -> Result<usize> {
        if self.n == 0 {
            return Err(Error::Config("matrix order n must be at least 1".into()));
        }
        if self.q == 0 {
            return Err(Error::Config("grid side q must be at least 1".into()));
        }
        if self.n.is_multiple_of(self.q) {
            Ok(self.n)
        } else if self.pad {
            Ok(self.n.div_ceil(self.q) * self.q)
        } else {
            Err(Error::GridIncompatible { n: self.n, q: self.q })
        }
    }

    /// Checks everything that can be checked before launching workers.
    pub fn validate(&self) -> Result<usize> {
        let n = self.effective_n()?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if let Some(h) = &self.hosts {
            if h.len() != self.p() {
                return Err(Error::Config(format!(
                    "host map has {} entries but q={} needs {}",
                    h.len(),
                    self.q,
                    self.p()
                )));
            }
        }
        if let Some(f) = &self.fault {
            if f.rank >= self.p() {
                return Err(Error::Config(format!(
                    "fault rank {} out of range for p={}",
                    f.rank,
                    self.p()
                )));
            }
        }
        Ok(n)
    }

    fn gang_config(&self) -> GangConfig {
        GangConfig {
            p: self.p(),
            max_restarts: self.max_restarts,
            timeouts: self.timeouts,
            port_base: self.port_base,
            fault: self.fault,
        }
    }
}

/// Mean of all elements of `C`: the sum of per-block sums over `n^2`.
/// `blocks` are in rank order and must number `q^2`.
pub fn reduce_avg<T: Element>(blocks: &[DenseTile<T>], q: usize, n: usize) -> Result<f64> {
    if blocks.len() != q * q {
        return Err(Error::Report(format!(
            "missing result blocks: have {}, need {}",
            blocks.len(),
            q * q
        )));
    }
    if n == 0 {
        return Err(Error::Config("matrix order n must be at least 1".into()));
    }
    let total: f64 = blocks.iter().map(DenseTile::sum_f64).sum();
    Ok(total / (n * n) as f64)
}

/// `m` embedded in the top-left corner of a `size x size` zero matrix.
pub fn pad_matrix<T: Element>(m: &DenseTile<T>, size: usize) -> Result<DenseTile<T>> {
    if size < m.rows() || size < m.cols() {
        return Err(Error::contract("padded size smaller than matrix"));
    }
    Ok(DenseTile::from_fn(size, size, |i, j| {
        if i < m.rows() && j < m.cols() {
            m.get(i, j)
        } else {
            T::zero()
        }
    }))
}

/// Top-left `n x n` corner of `m`.
pub fn unpad_matrix<T: Element>(m: &DenseTile<T>, n: usize) -> Result<DenseTile<T>> {
    if n > m.rows() || n > m.cols() {
        return Err(Error::contract("unpadded size larger than matrix"));
    }
    if n == m.rows() && n == m.cols() {
        return Ok(m.clone());
    }
    Ok(DenseTile::from_fn(n, n, |i, j| m.get(i, j)))
}

/// Per-element relative tolerance against the oracle for an order-`n`
/// product. Integers must match exactly.
pub fn tolerance(dtype: ElementType, n: usize) -> f64 {
    match dtype {
        ElementType::F64 => 1e-12 * n as f64,
        ElementType::F32 => 1e-5 * n as f64,
        ElementType::I32 => 0.0,
    }
}

/// Compares a product against the oracle element by element.
pub fn compare_to_oracle<T: Element>(got: &DenseTile<T>, want: &DenseTile<T>) -> Result<Verification> {
    if got.rows() != want.rows() || got.cols() != want.cols() {
        return Err(Error::contract("result and oracle differ in shape"));
    }
    let tol = tolerance(T::DTYPE, want.cols());
    let mut max_rel_err = 0.0f64;
    let mut mismatches = 0usize;
    for (&g, &w) in got.as_slice().iter().zip(want.as_slice()) {
        let err = if g == w {
            0.0
        } else {
            let (g, w) = (g.as_f64(), w.as_f64());
            (g - w).abs() / w.abs().max(f64::MIN_POSITIVE)
        };
        if err > tol {
            mismatches += 1;
        }
        max_rel_err = max_rel_err.max(err);
    }
    Ok(Verification {
        tolerance: tol,
        max_rel_err,
        mismatches,
        passed: mismatches == 0,
    })
}

/// A finished run: the report plus the gathered product.
#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub report: RunReport,
    pub product: DenseTile<T>,
}

pub(crate) struct Gathered<T> {
    pub blocks: Vec<DenseTile<T>>,
    pub metrics: Vec<WorkerMetrics>,
    pub attempt: u32,
    pub failures: Vec<String>,
}

/// Runs the configured multiply and returns the report and the product.
pub fn run_typed<T: Element>(cfg: &RunConfig) -> Result<RunOutput<T>> {
    if cfg.dtype != T::DTYPE {
        return Err(Error::contract(format!(
            "config asks for {} but the run is typed {}",
            cfg.dtype,
            T::DTYPE
        )));
    }
    let n_eff = cfg.validate()?;
    let gathered = match cfg.mode {
        LaunchMode::Threads => run_threads::<T>(cfg, n_eff)?,
        LaunchMode::Processes => process::run_processes::<T>(cfg, n_eff)?,
    };
    finish(cfg, n_eff, gathered)
}

/// [`run_typed`] with the element type taken from the config; the product
/// is dropped after checksum and verification.
pub fn run_distributed(cfg: &RunConfig) -> Result<RunReport> {
    match cfg.dtype {
        ElementType::F64 => run_typed::<f64>(cfg).map(|o| o.report),
        ElementType::F32 => run_typed::<f32>(cfg).map(|o| o.report),
        ElementType::I32 => run_typed::<i32>(cfg).map(|o| o.report),
    }
}

/// [`run_distributed`] with the all-gather baseline.
pub fn run_baseline_allgather(cfg: &RunConfig) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.implementation = Implementation::Baseline;
    run_distributed(&cfg)
}

fn operands<T: Element>(cfg: &RunConfig, n_eff: usize) -> Result<(DenseTile<T>, DenseTile<T>)> {
    let a = generate_operand::<T>(cfg.n, cfg.seed, Operand::A);
    let b = generate_operand::<T>(cfg.n, cfg.seed, Operand::B);
    if n_eff == cfg.n {
        Ok((a, b))
    } else {
        Ok((pad_matrix(&a, n_eff)?, pad_matrix(&b, n_eff)?))
    }
}

fn run_threads<T: Element>(cfg: &RunConfig, n_eff: usize) -> Result<Gathered<T>> {
    let (a, b) = operands::<T>(cfg, n_eff)?;
    let a_blocks = split_into_blocks(&a, cfg.q)?;
    let b_blocks = split_into_blocks(&b, cfg.q)?;
    drop((a, b));
    let job = WorkerJob {
        implementation: cfg.implementation,
        reps: cfg.reps,
        scatter_delay: cfg.scatter_delay,
    };
    let q = cfg.q;
    let run = run_gang(&cfg.gang_config(), |session| {
        let (i, j) = (session.rank() / q, session.rank() % q);
        run_worker(session, &job, || (a_blocks[i][j].clone(), b_blocks[i][j].clone()))
    })?;
    let (blocks, metrics) = run.results.into_iter().unzip();
    Ok(Gathered {
        blocks,
        metrics,
        attempt: run.attempt,
        failures: run.failures,
    })
}

fn finish<T: Element>(cfg: &RunConfig, n_eff: usize, g: Gathered<T>) -> Result<RunOutput<T>> {
    let checksum = reduce_avg(&g.blocks, cfg.q, cfg.n)?;
    let mut grid: Vec<Vec<DenseTile<T>>> = Vec::with_capacity(cfg.q);
    let mut it = g.blocks.into_iter();
    for _ in 0..cfg.q {
        grid.push(it.by_ref().take(cfg.q).collect());
    }
    let product = unpad_matrix(&assemble_from_blocks(&grid)?, cfg.n)?;
    let verification = if cfg.verify {
        let a = generate_operand::<T>(cfg.n, cfg.seed, Operand::A);
        let b = generate_operand::<T>(cfg.n, cfg.seed, Operand::B);
        Some(compare_to_oracle(&product, &oracle_multiply(&a, &b)?)?)
    } else {
        None
    };
    let report = RunReport::build(
        cfg,
        n_eff,
        checksum,
        g.attempt,
        g.failures,
        g.metrics,
        verification,
    );
    Ok(RunOutput { report, product })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_of_ones_and_zeros() {
        let ones = vec![DenseTile::from_fn(2, 2, |_, _| 1.0f64); 4];
        assert_eq!(reduce_avg(&ones, 2, 4).unwrap(), 1.0);
        let zeros = vec![DenseTile::<f64>::zeros(2, 2); 4];
        assert_eq!(reduce_avg(&zeros, 2, 4).unwrap(), 0.0);
    }

    #[test]
    fn avg_missing_block() {
        let three = vec![DenseTile::<f64>::zeros(2, 2); 3];
        assert!(matches!(reduce_avg(&three, 2, 4), Err(Error::Report(_))));
    }

    #[test]
    fn effective_n_rules() {
        assert_eq!(RunConfig::new(64, 2).effective_n().unwrap(), 64);
        let err = RunConfig::new(64, 3).effective_n().unwrap_err();
        assert!(err.to_string().contains("n=64") && err.to_string().contains("q=3"));
        let mut cfg = RunConfig::new(64, 3);
        cfg.pad = true;
        assert_eq!(cfg.effective_n().unwrap(), 66);
        assert!(RunConfig::new(0, 1).effective_n().is_err());
        assert!(RunConfig::new(4, 0).effective_n().is_err());
    }

    #[test]
    fn pad_round_trip() {
        let m: DenseTile<i32> = generate_matrix(5, 1);
        let p = pad_matrix(&m, 6).unwrap();
        assert_eq!(p.get(5, 5), 0);
        assert_eq!(p.get(4, 4), m.get(4, 4));
        assert_eq!(unpad_matrix(&p, 5).unwrap(), m);
    }

    #[test]
    fn verification_flags_mismatch() {
        let a: DenseTile<f64> = generate_matrix(4, 1);
        let ok = compare_to_oracle(&a, &a).unwrap();
        assert!(ok.passed && ok.max_rel_err == 0.0);
        let mut b = a.clone();
        b.set(1, 2, b.get(1, 2) + 1.0);
        let bad = compare_to_oracle(&b, &a).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.mismatches, 1);
    }

    #[test]
    fn typed_run_rejects_other_dtype() {
        let cfg = RunConfig::new(2, 1);
        assert!(run_typed::<i32>(&cfg).is_err());
    }
}
