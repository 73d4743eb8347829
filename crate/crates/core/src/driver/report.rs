// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Implementation, LaunchMode, RunConfig, WorkerMetrics};
use crate::error::{Error, Result};
use crate::scalar::ElementType;

/// Outcome of comparing a gathered product with the oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub mismatches: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    /// Slowest worker's barrier-to-barrier time.
    pub dot_ms: f64,
    /// Largest per-worker tile bytes.
    pub peak_worker_bytes: usize,
}

/// Everything recorded about one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(rename = "impl")]
    pub implementation: Implementation,
    pub n: usize,
    /// Order after zero padding; equals `n` unless padding was requested.
    pub padded_n: usize,
    pub q: usize,
    pub p: usize,
    pub dtype: ElementType,
    pub seed: u64,
    pub mode: LaunchMode,
    /// Attempts made, including the successful one.
    pub attempts: u32,
    /// Why each failed attempt failed.
    pub failures: Vec<String>,
    /// Mean of all elements of the product.
    pub checksum: f64,
    pub reps: Vec<RepRecord>,
    pub workers: Vec<WorkerMetrics>,
    pub verification: Option<Verification>,
}

#[derive(Serialize)]
struct CsvRow {
    #[serde(rename = "impl")]
    implementation: &'static str,
    n: usize,
    q: usize,
    p: usize,
    dtype: &'static str,
    rep: usize,
    dot_ms: f64,
    peak_worker_bytes: usize,
    checksum: f64,
    attempts: u32,
}

impl RunReport {
    pub(crate) fn build(
        cfg: &RunConfig,
        padded_n: usize,
        checksum: f64,
        attempt: u32,
        failures: Vec<String>,
        workers: Vec<WorkerMetrics>,
        verification: Option<Verification>,
    ) -> Self {
        let reps = (0..cfg.reps)
            .map(|rep| RepRecord {
                rep,
                dot_ms: workers
                    .iter()
                    .filter_map(|w| w.reps.get(rep))
                    .map(|r| r.dot_ms)
                    .fold(0.0, f64::max),
                peak_worker_bytes: workers
                    .iter()
                    .filter_map(|w| w.reps.get(rep))
                    .map(|r| r.peak_data_bytes)
                    .max()
                    .unwrap_or(0),
            })
            .collect();
        RunReport {
            implementation: cfg.implementation,
            n: cfg.n,
            padded_n,
            q: cfg.q,
            p: cfg.p(),
            dtype: cfg.dtype,
            seed: cfg.seed,
            mode: cfg.mode,
            attempts: attempt + 1,
            failures,
            checksum,
            reps,
            workers,
            verification,
        }
    }

    /// Largest per-worker tile bytes over all repetitions.
    pub fn peak_worker_bytes(&self) -> usize {
        self.reps.iter().map(|r| r.peak_worker_bytes).max().unwrap_or(0)
    }

    /// Median of the per-repetition times.
    pub fn median_dot_ms(&self) -> f64 {
        let mut t: Vec<f64> = self.reps.iter().map(|r| r.dot_ms).collect();
        if t.is_empty() {
            return f64::NAN;
        }
        t.sort_by(f64::total_cmp);
        let m = t.len() / 2;
        if t.len() % 2 == 1 {
            t[m]
        } else {
            (t[m - 1] + t[m]) / 2.0
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }

    /// One row per repetition.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_csv_rows(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    fn write_csv_rows<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for r in &self.reps {
            w.serialize(CsvRow {
                implementation: self.implementation.name(),
                n: self.n,
                q: self.q,
                p: self.p,
                dtype: self.dtype.name(),
                rep: r.rep,
                dot_ms: r.dot_ms,
                peak_worker_bytes: r.peak_worker_bytes,
                checksum: self.checksum,
                attempts: self.attempts,
            })
            .map_err(|e| Error::Report(e.to_string()))?;
        }
        Ok(())
    }

    /// Rows of several reports under one header.
    pub fn csv_of(reports: &[RunReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in reports {
            r.write_csv_rows(&mut w)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    /// File stem shared by the JSON and CSV outputs.
    pub fn stem(&self) -> String {
        format!(
            "{}_n{}_q{}_{}_s{}",
            self.implementation.name(),
            self.n,
            self.q,
            self.dtype.name(),
            self.seed
        )
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::Report(format!("{}: {e}", dir.display())))?;
        let json = dir.join(format!("{}.json", self.stem()));
        let csv = dir.join(format!("{}.csv", self.stem()));
        fs::write(&json, self.to_json()?).map_err(|e| Error::Report(format!("{}: {e}", json.display())))?;
        fs::write(&csv, self.to_csv()?).map_err(|e| Error::Report(format!("{}: {e}", csv.display())))?;
        Ok((json, csv))
    }
}
