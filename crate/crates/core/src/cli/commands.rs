// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::time::Duration;

use super::{
    AnalyzeArgs, BenchArgs, BenchImpl, GangArgs, RunArgs, VerifyArgs, WorkerArgs, DEFAULT_PORT_BASE,
    EXIT_MISMATCH, EXIT_OK,
};
use crate::analysis::{
    communication_volume, fit_and_compare, memory_per_processor_at_isoefficiency, min_scaling_order,
    problem_size, sequential_time_units, timing_csv, timing_table,
};
use crate::barrier::FaultPlan;
use crate::driver::{
    compare_to_oracle, generate_operand, run_distributed, run_typed, worker_main, Implementation, LaunchMode,
    Operand, RunConfig, RunReport, WorkerSpec,
};
use crate::error::{Error, Result};
use crate::scalar::{Element, ElementType};
use crate::tile::oracle_multiply;
use crate::transport::{HostMap, Timeouts};

/// `CANNON_PORT_BASE`, defaulting to 47000; `0` means ephemeral ports.
fn port_base() -> Result<Option<u16>> {
    match std::env::var("CANNON_PORT_BASE") {
        Err(_) => Ok(Some(DEFAULT_PORT_BASE)),
        Ok(v) => match v.trim().parse::<u16>() {
            Ok(0) => Ok(None),
            Ok(b) => Ok(Some(b)),
            Err(_) => Err(Error::Config(format!(
                "CANNON_PORT_BASE `{v}` is not a port number"
            ))),
        },
    }
}

fn base_config(n: usize, q: usize, gang: &GangArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(n, q);
    cfg.max_restarts = gang.max_restarts;
    cfg.timeouts = Timeouts {
        connect: Duration::from_secs(gang.connect_timeout),
        barrier: Duration::from_secs(gang.barrier_timeout),
        ..Timeouts::default()
    };
    cfg.port_base = port_base()?;
    cfg.mode = gang.mode.map_or(LaunchMode::Threads, Into::into);
    if let Some(path) = &gang.hosts {
        if cfg.mode == LaunchMode::Threads && gang.mode.is_some() {
            return Err(Error::Config("--hosts needs processes mode".into()));
        }
        cfg.mode = LaunchMode::Processes;
        cfg.hosts = Some(HostMap::load(path)?);
    }
    Ok(cfg)
}

pub(super) fn run(a: &RunArgs) -> Result<i32> {
    let mut cfg = base_config(a.n, a.q, &a.gang)?;
    cfg.dtype = a.dtype.into();
    cfg.seed = a.seed;
    cfg.reps = a.reps;
    cfg.implementation = a.implementation.into();
    cfg.verify = a.verify;
    cfg.pad = a.pad;
    cfg.scatter_delay = Duration::from_millis(a.scatter_delay_ms);
    cfg.fault = a.inject_fault.as_deref().map(FaultPlan::parse).transpose()?;
    let report = run_distributed(&cfg)?;
    let (json, csv) = report.write_files(&a.out)?;
    println!(
        "{} n={} q={} {}: checksum {:.12e}, median {:.3} ms over {} reps, {} attempt(s)",
        report.implementation.name(),
        report.n,
        report.q,
        report.dtype,
        report.checksum,
        report.median_dot_ms(),
        report.reps.len(),
        report.attempts
    );
    println!("wrote {} and {}", json.display(), csv.display());
    match &report.verification {
        Some(v) if !v.passed => {
            eprintln!(
                "verification failed: {} element(s) beyond tolerance {:e} (max relative error {:e})",
                v.mismatches, v.tolerance, v.max_rel_err
            );
            Ok(EXIT_MISMATCH)
        }
        Some(v) => {
            println!("verified against oracle: max relative error {:e}", v.max_rel_err);
            Ok(EXIT_OK)
        }
        None => Ok(EXIT_OK),
    }
}

/// The default oracle sweep: orders prime to the grid as well as powers of
/// two, 6 to 512, for every q in 1..=4.
pub fn default_sweep() -> Vec<(usize, usize)> {
    let sizes: [(usize, &[usize]); 4] = [
        (1, &[6, 17, 64, 100]),
        (2, &[6, 12, 64, 128, 256]),
        (3, &[6, 9, 27, 96, 192]),
        (4, &[8, 12, 40, 128, 512]),
    ];
    sizes
        .iter()
        .flat_map(|&(q, ns)| ns.iter().map(move |&n| (n, q)))
        .collect()
}

fn verify_point<T: Element>(cfg: &RunConfig, corrupt: bool) -> Result<bool> {
    let out = run_typed::<T>(cfg)?;
    let mut product = out.product;
    if corrupt {
        let v = product.get(0, 0);
        product.set(0, 0, <T as Element>::add(v, T::one()));
    }
    let a = generate_operand::<T>(cfg.n, cfg.seed, Operand::A);
    let b = generate_operand::<T>(cfg.n, cfg.seed, Operand::B);
    let check = compare_to_oracle(&product, &oracle_multiply(&a, &b)?)?;
    println!(
        "{:<4} n={:<4} q={} {}: max relative error {:.3e} (tolerance {:.1e})",
        if check.passed { "ok" } else { "FAIL" },
        cfg.n,
        cfg.q,
        cfg.dtype,
        check.max_rel_err,
        check.tolerance
    );
    Ok(check.passed)
}

pub(super) fn verify(a: &VerifyArgs) -> Result<i32> {
    let points: Vec<(usize, usize)> = match (a.n, a.q) {
        (Some(0), _) => return Err(Error::Config("matrix order n must be at least 1".into())),
        (Some(n), Some(q)) => vec![(n, q)],
        (Some(n), None) => (1..=4).filter(|q| n % q == 0).map(|q| (n, q)).collect(),
        (None, Some(q)) => default_sweep().into_iter().filter(|&(_, g)| g == q).collect(),
        (None, None) => default_sweep(),
    };
    if points.is_empty() {
        return Err(Error::Config("no (n, q) points to verify".into()));
    }
    let dtypes: Vec<ElementType> = if a.dtype.is_empty() {
        vec![ElementType::F64, ElementType::I32]
    } else {
        a.dtype.iter().map(|&d| d.into()).collect()
    };
    let mut failed = 0;
    let mut checked = 0;
    for &dtype in &dtypes {
        for &(n, q) in &points {
            let mut cfg = base_config(n, q, &a.gang)?;
            cfg.dtype = dtype;
            cfg.seed = a.seed;
            cfg.reps = 1;
            let ok = match dtype {
                ElementType::F64 => verify_point::<f64>(&cfg, a.corrupt)?,
                ElementType::F32 => verify_point::<f32>(&cfg, a.corrupt)?,
                ElementType::I32 => verify_point::<i32>(&cfg, a.corrupt)?,
            };
            checked += 1;
            if !ok {
                failed += 1;
            }
        }
    }
    println!("{checked} point(s) checked, {failed} mismatch(es)");
    Ok(if failed == 0 { EXIT_OK } else { EXIT_MISMATCH })
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
}

pub(super) fn bench(a: &BenchArgs) -> Result<i32> {
    let impls: &[Implementation] = match a.implementation {
        BenchImpl::Cannon => &[Implementation::Cannon],
        BenchImpl::Baseline => &[Implementation::Baseline],
        BenchImpl::Both => &[Implementation::Cannon, Implementation::Baseline],
    };
    let make = |n: usize, q: usize, imp: Implementation| -> Result<RunConfig> {
        let mut cfg = base_config(n, q, &a.gang)?;
        cfg.dtype = a.dtype.into();
        cfg.seed = a.seed;
        cfg.reps = a.reps;
        cfg.implementation = imp;
        Ok(cfg)
    };
    let mut reports = Vec::new();
    for &n in &a.sizes {
        for &q in &a.grids {
            if q == 0 || n % q != 0 {
                eprintln!("skipping n={n} q={q}: n is not divisible by q");
                continue;
            }
            for &imp in impls {
                reports.push(run_distributed(&make(n, q, imp)?)?);
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Config("the sweep has no valid (n, q) point".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::Report(format!("{}: {e}", a.out.display())))?;
    let timing = timing_csv(&timing_table(&reports));
    print!("{timing}");
    write(&a.out, "bench_timing.csv", &timing)?;
    write(&a.out, "bench_runs.csv", &RunReport::csv_of(&reports)?)?;
    write(
        &a.out,
        "bench_runs.json",
        &serde_json::to_string_pretty(&reports).map_err(|e| Error::Report(e.to_string()))?,
    )?;

    let mut memory_reports = Vec::new();
    if let Some(tile) = a.tile {
        for &q in &a.grids {
            for &imp in impls {
                memory_reports.push(run_distributed(&make(tile * q, q, imp)?)?);
            }
        }
    } else {
        memory_reports.clone_from(&reports);
    }
    match fit_and_compare(&memory_reports) {
        Ok(table) => {
            let csv = table.to_csv()?;
            println!();
            print!("{csv}");
            for f in &table.fits {
                println!(
                    "{}: slope {:.1} B/q, variation {:.2}%{}",
                    f.implementation.name(),
                    f.slope,
                    f.variation * 100.0,
                    if f.violation {
                        " (exceeds flatness limit)"
                    } else {
                        ""
                    }
                );
            }
            write(&a.out, "bench_memory.csv", &csv)?;
            write(&a.out, "bench_memory.json", &table.to_series_json()?)?;
        }
        Err(e) => eprintln!("memory table skipped: {e}"),
    }
    Ok(EXIT_OK)
}

fn load_reports(path: &Path) -> Result<Vec<RunReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    if let Ok(many) = serde_json::from_str::<Vec<RunReport>>(&text) {
        return Ok(many);
    }
    RunReport::from_json(&text)
        .map(|r| vec![r])
        .map_err(|e| Error::Report(format!("{}: {e}", path.display())))
}

pub(super) fn analyze(a: &AnalyzeArgs) -> Result<i32> {
    if let Some(n) = a.n {
        println!("W  = n^2          = {}", problem_size::<f64>(n));
        println!("T1 = n^3          = {}", sequential_time_units::<f64>(n));
        println!("D  = n^2/sqrt(p)  = {}", communication_volume::<f64>(n, a.p)?);
        println!("n_min = ceil(c sqrt(p)) = {}", min_scaling_order(a.p, a.c));
        println!(
            "M(c sqrt(p))/p    = {}",
            memory_per_processor_at_isoefficiency(a.c)
        );
    }
    if a.reports.is_empty() {
        if a.n.is_none() {
            return Err(Error::Config(
                "nothing to analyze: give report files or --n".into(),
            ));
        }
        return Ok(EXIT_OK);
    }
    let mut reports = Vec::new();
    for p in &a.reports {
        reports.extend(load_reports(p)?);
    }
    let timing = timing_csv(&timing_table(&reports));
    print!("{timing}");
    let table = fit_and_compare(&reports)?;
    let csv = table.to_csv()?;
    println!();
    print!("{csv}");
    for f in &table.fits {
        println!(
            "{}: slope {:.1} B/q, variation {:.2}%{}",
            f.implementation.name(),
            f.slope,
            f.variation * 100.0,
            if f.violation {
                " (exceeds flatness limit)"
            } else {
                ""
            }
        );
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::Report(format!("{}: {e}", dir.display())))?;
        write(dir, "analysis_timing.csv", &timing)?;
        write(dir, "analysis_memory.csv", &csv)?;
        write(dir, "analysis_memory.json", &table.to_series_json()?)?;
    }
    Ok(EXIT_OK)
}

pub(super) fn worker(a: &WorkerArgs) -> Result<i32> {
    let spec = WorkerSpec {
        rank: a.rank,
        q: a.q,
        n: a.n,
        pad: a.pad,
        dtype: a.dtype,
        seed: a.seed,
        reps: a.reps,
        implementation: a.implementation.into(),
        hosts_file: a.hosts.clone(),
        coordinator: a.coordinator,
        attempt: a.attempt,
        block_out: a.block_out.clone(),
        fault: a.fault.as_deref().map(FaultPlan::parse).transpose()?,
        scatter_delay: Duration::from_millis(a.scatter_delay_ms),
        timeouts: Timeouts {
            connect: Duration::from_millis(a.connect_timeout_ms),
            io: Duration::from_millis(a.io_timeout_ms),
            barrier: Duration::from_millis(a.barrier_timeout_ms),
        },
    };
    let metrics = worker_main(&spec)?;
    println!(
        "{}",
        serde_json::to_string(&metrics).map_err(|e| Error::Report(e.to_string()))?
    );
    Ok(EXIT_OK)
}
