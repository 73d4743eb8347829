// SPDX-License-Identifier: Apache-2.0

//! Live/peak byte counters for worker data and transport buffers.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
    allocations: AtomicU64,
}

/// Shared handle to one worker's byte counters. Cloning shares the counters.
#[derive(Clone, Debug, Default)]
pub struct MemoryMeter {
    inner: Arc<Counters>,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `bytes` as live until the returned guard is dropped.
    pub fn track(&self, bytes: usize) -> Tracked {
        let live = self.inner.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.inner.peak.fetch_max(live, Ordering::SeqCst);
        self.inner.allocations.fetch_add(1, Ordering::SeqCst);
        Tracked {
            meter: self.clone(),
            bytes,
        }
    }

    pub fn live(&self) -> usize {
        self.inner.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    /// Number of `track` calls so far.
    pub fn allocations(&self) -> u64 {
        self.inner.allocations.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the current live value.
    pub fn reset_peak(&self) {
        self.inner.peak.store(self.live(), Ordering::SeqCst);
    }
}

/// RAII registration of live bytes with a [`MemoryMeter`].
#[derive(Debug)]
pub struct Tracked {
    meter: MemoryMeter,
    bytes: usize,
}

impl Tracked {
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl Drop for Tracked {
    fn drop(&mut self) {
        self.meter.inner.live.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// Peak resident set size of this process, from `/proc/self/status`.
pub fn process_peak_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

/// User + system CPU time of this process in milliseconds.
pub fn process_cpu_ms() -> Option<f64> {
    // SAFETY: getrusage only writes into the zeroed struct we pass.
    let usage = unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut usage) != 0 {
            return None;
        }
        usage
    };
    let ms = |tv: libc::timeval| tv.tv_sec as f64 * 1e3 + tv.tv_usec as f64 / 1e3;
    Some(ms(usage.ru_utime) + ms(usage.ru_stime))
}
