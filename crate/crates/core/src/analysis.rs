// SPDX-License-Identifier: Apache-2.0

//! The scalability model as unit-free formulas, and comparison of its
//! trends against measured run reports.
//!
//! Every asymptotic statement is taken with constant 1: `W = n^2`,
//! `T1 = n^3`, `D = n^2 / sqrt(p)`, `M(n) = n^2`. Only ratios and trends are
//! compared with measurements.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::driver::{Implementation, RunReport};
use crate::error::{Error, Result};
use crate::topology::exact_sqrt;

/// Largest relative spread of Cannon's per-worker memory across grid sizes
/// that still counts as flat.
pub const FLATNESS_LIMIT: f64 = 0.10;

fn cast<F: Float>(v: u64) -> F {
    F::from(v).expect("every u64 is representable, possibly rounded")
}

/// Problem size `W = n^2`.
pub fn problem_size<F: Float>(n: u64) -> F {
    let n = cast::<F>(n);
    n * n
}

/// Sequential time `T1 = n^3` in multiply-add units.
pub fn sequential_time_units<F: Float>(n: u64) -> F {
    let n = cast::<F>(n);
    n * n * n
}

/// Memory as a function of matrix order, `M(n) = n^2`.
pub fn memory_of_order<F: Float>(n: F) -> F {
    n * n
}

/// Communication volume `D = n^2 / sqrt(p)` in elements. `p` must be a
/// perfect square.
pub fn communication_volume<F: Float>(n: u64, p: u64) -> Result<F> {
    let q = exact_sqrt(p as usize)
        .filter(|&q| q > 0)
        .ok_or_else(|| Error::Analysis(format!("p={p} is not a positive perfect square")))?;
    Ok(problem_size::<F>(n) / cast::<F>(q as u64))
}

/// Smallest integer order keeping efficiency constant, `ceil(c * sqrt(p))`.
pub fn min_scaling_order<F: Float>(p: u64, c: F) -> u64 {
    let v = (c * cast::<F>(p).sqrt()).ceil();
    v.to_u64().unwrap_or(u64::MAX)
}

/// `M(c sqrt(p)) / p = c^2`. Takes no `p`: the value cannot depend on it.
pub fn memory_per_processor_at_isoefficiency<F: Float>(c: F) -> F {
    c * c
}

/// The model's quantities for one `(n, p, c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingModel<F> {
    pub n: u64,
    pub p: u64,
    pub c: F,
}

impl<F: Float> ScalingModel<F> {
    pub fn new(n: u64, p: u64, c: F) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::Analysis("n and p must be at least 1".into()));
        }
        Ok(ScalingModel { n, p, c })
    }

    pub fn problem_size(&self) -> F {
        problem_size(self.n)
    }

    pub fn sequential_time(&self) -> F {
        sequential_time_units(self.n)
    }

    pub fn communication_volume(&self) -> Result<F> {
        communication_volume(self.n, self.p)
    }

    pub fn min_scaling_order(&self) -> u64 {
        min_scaling_order(self.p, self.c)
    }

    pub fn memory_per_processor(&self) -> F {
        memory_per_processor_at_isoefficiency(self.c)
    }

    /// Whether `n` is at least the iso-efficiency order for `p`.
    pub fn is_isoefficient(&self) -> bool {
        self.n >= self.min_scaling_order()
    }
}

/// Least-squares line `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Analysis("a line fit needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Analysis("a line fit needs two distinct x values".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// One measured point of the memory table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    #[serde(rename = "impl")]
    pub implementation: Implementation,
    pub q: usize,
    pub p: usize,
    pub tile_n: usize,
    pub peak_worker_bytes: usize,
    /// Tiles the algorithm holds at once times the tile size: 3 for
    /// Cannon, `2q + 1` for the all-gather baseline.
    pub model_bytes: usize,
}

/// Fit of per-worker memory against `q` for one implementation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryFit {
    #[serde(rename = "impl")]
    pub implementation: Implementation,
    pub tile_n: usize,
    /// Bytes per unit of `q`.
    pub slope: f64,
    pub intercept: f64,
    /// `(max - min) / min` of the measured peaks.
    pub variation: f64,
    /// Largest relative distance of a point from the mean.
    pub flat_residual: f64,
    /// Peaks never decrease as `q` grows.
    pub monotonic: bool,
    /// Cannon only: variation above [`FLATNESS_LIMIT`].
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryComparison {
    pub rows: Vec<MemoryRow>,
    pub fits: Vec<MemoryFit>,
}

impl MemoryComparison {
    pub fn fit(&self, implementation: Implementation) -> Option<&MemoryFit> {
        self.fits.iter().find(|f| f.implementation == implementation)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Analysis(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Analysis(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Analysis(e.to_string()))
    }

    /// Plot-ready series: one object per implementation with parallel
    /// arrays, plus the fits.
    pub fn to_series_json(&self) -> Result<String> {
        let mut series: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
        for imp in [Implementation::Cannon, Implementation::Baseline] {
            let rows: Vec<&MemoryRow> = self.rows.iter().filter(|r| r.implementation == imp).collect();
            if rows.is_empty() {
                continue;
            }
            series.insert(
                imp.name(),
                serde_json::json!({
                    "q": rows.iter().map(|r| r.q).collect::<Vec<_>>(),
                    "peak_worker_bytes": rows.iter().map(|r| r.peak_worker_bytes).collect::<Vec<_>>(),
                    "model_bytes": rows.iter().map(|r| r.model_bytes).collect::<Vec<_>>(),
                }),
            );
        }
        serde_json::to_string_pretty(&serde_json::json!({
            "series": series,
            "fits": self.fits,
        }))
        .map_err(|e| Error::Analysis(e.to_string()))
    }
}

fn model_tiles(implementation: Implementation, q: usize) -> usize {
    match implementation {
        Implementation::Cannon => 3,
        Implementation::Baseline => 2 * q + 1,
    }
}

/// Per-worker peak memory against grid size, with a flatness check for
/// Cannon and a growth slope for the baseline.
///
/// Every implementation present needs at least two grid sizes at one
/// fixed tile size. Several reports at the same `q` keep the largest peak.
pub fn fit_and_compare(reports: &[RunReport]) -> Result<MemoryComparison> {
    if reports.is_empty() {
        return Err(Error::Analysis("no reports to analyze".into()));
    }
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for imp in [Implementation::Cannon, Implementation::Baseline] {
        let mine: Vec<&RunReport> = reports.iter().filter(|r| r.implementation == imp).collect();
        if mine.is_empty() {
            continue;
        }
        let tiles: BTreeSet<usize> = mine.iter().map(|r| r.padded_n / r.q).collect();
        if tiles.len() != 1 {
            return Err(Error::Analysis(format!(
                "{} reports mix tile sizes {tiles:?}; memory trends need one fixed tile size",
                imp.name()
            )));
        }
        let tile_n = *tiles.iter().next().expect("non-empty");
        let mut by_q: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for r in &mine {
            let width = r.dtype.width();
            let e = by_q.entry(r.q).or_insert((0, width));
            e.0 = e.0.max(r.peak_worker_bytes());
        }
        if by_q.len() < 2 {
            return Err(Error::Analysis(format!(
                "{} reports cover {} grid size(s); need at least 2",
                imp.name(),
                by_q.len()
            )));
        }
        let xs: Vec<f64> = by_q.keys().map(|&q| q as f64).collect();
        let ys: Vec<f64> = by_q.values().map(|&(b, _)| b as f64).collect();
        let line = least_squares(&xs, &ys)?;
        let (min, max) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
                (lo.min(y), hi.max(y))
            });
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let variation = if min > 0.0 {
            (max - min) / min
        } else if max > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let flat_residual = if mean > 0.0 {
            ys.iter().map(|y| (y - mean).abs() / mean).fold(0.0, f64::max)
        } else {
            0.0
        };
        let monotonic = ys.windows(2).all(|w| w[1] >= w[0]);
        fits.push(MemoryFit {
            implementation: imp,
            tile_n,
            slope: line.slope,
            intercept: line.intercept,
            variation,
            flat_residual,
            monotonic,
            violation: imp == Implementation::Cannon && variation > FLATNESS_LIMIT,
        });
        for (&q, &(bytes, width)) in &by_q {
            rows.push(MemoryRow {
                implementation: imp,
                q,
                p: q * q,
                tile_n,
                peak_worker_bytes: bytes,
                model_bytes: model_tiles(imp, q) * tile_n * tile_n * width,
            });
        }
    }
    Ok(MemoryComparison { rows, fits })
}

/// Median multiply time of one `(n, q)` point for each implementation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub q: usize,
    pub cannon_ms: Option<f64>,
    pub baseline_ms: Option<f64>,
    /// Baseline time over Cannon time; present only when both ran.
    pub baseline_normalized: Option<f64>,
}

/// Times per `(n, q)`, normalized to Cannon where both implementations ran.
pub fn timing_table(reports: &[RunReport]) -> Vec<TimingRow> {
    let mut points: BTreeMap<(usize, usize), TimingRow> = BTreeMap::new();
    for r in reports {
        let row = points.entry((r.n, r.q)).or_insert(TimingRow {
            n: r.n,
            q: r.q,
            cannon_ms: None,
            baseline_ms: None,
            baseline_normalized: None,
        });
        let t = Some(r.median_dot_ms());
        match r.implementation {
            Implementation::Cannon => row.cannon_ms = t,
            Implementation::Baseline => row.baseline_ms = t,
        }
    }
    points
        .into_values()
        .map(|mut row| {
            if let (Some(c), Some(b)) = (row.cannon_ms, row.baseline_ms) {
                row.baseline_normalized = Some(if c > 0.0 { b / c } else { f64::NAN });
            }
            row
        })
        .collect()
}

/// The timing table as CSV. The normalization column is left out when no
/// row has both implementations.
pub fn timing_csv(rows: &[TimingRow]) -> String {
    let normalized = rows.iter().any(|r| r.baseline_normalized.is_some());
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut out = String::from("n,q,cannon_ms,baseline_ms");
    if normalized {
        out.push_str(",baseline_normalized");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}",
            r.n,
            r.q,
            fmt(r.cannon_ms),
            fmt(r.baseline_ms)
        ));
        if normalized {
            out.push(',');
            out.push_str(&fmt(r.baseline_normalized));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_exact() {
        let f = least_squares(&[1.0, 2.0, 3.0], &[5.0, 7.0, 9.0]).unwrap();
        assert_eq!(f.slope, 2.0);
        assert_eq!(f.intercept, 3.0);
        assert!(least_squares(&[1.0], &[1.0]).is_err());
        assert!(least_squares(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn volume_needs_square_p() {
        assert!(communication_volume::<f64>(4, 8).is_err());
        assert!(communication_volume::<f64>(4, 0).is_err());
    }

    #[test]
    fn model_struct() {
        let m = ScalingModel::new(16, 16, 4.0f64).unwrap();
        assert_eq!(m.problem_size(), 256.0);
        assert_eq!(m.sequential_time(), 4096.0);
        assert_eq!(m.communication_volume().unwrap(), 64.0);
        assert_eq!(m.min_scaling_order(), 16);
        assert!(m.is_isoefficient());
        assert_eq!(m.memory_per_processor(), 16.0);
        assert!(ScalingModel::new(0, 1, 1.0f64).is_err());
    }

    #[test]
    fn memory_function_matches_problem_size() {
        assert_eq!(memory_of_order(30.0f64), problem_size::<f64>(30));
    }

    #[test]
    fn timing_without_both_has_no_normalization() {
        let rows = vec![TimingRow {
            n: 8,
            q: 2,
            cannon_ms: None,
            baseline_ms: Some(1.0),
            baseline_normalized: None,
        }];
        let csv = timing_csv(&rows);
        assert!(!csv.contains("normalized"));
        assert_eq!(csv.lines().count(), 2);
    }
}
