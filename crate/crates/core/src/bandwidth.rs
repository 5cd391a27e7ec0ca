//! Bandwidth selection by minimum bootstrap variance over a candidate grid.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;

/// Fraction of bootstrap replicates that must succeed for each candidate.
pub const MIN_SUCCESS_RATE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthGrid {
    #[serde(default = "default_candidates")]
    pub candidates: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_candidates() -> Vec<f64> {
    vec![0.05, 0.1, 0.25, 0.5]
}

fn default_replicates() -> usize {
    100
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        Self {
            candidates: default_candidates(),
            replicates: default_replicates(),
        }
    }
}

impl BandwidthGrid {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::InvalidArgument("bandwidth grid is empty".into()));
        }
        if let Some(&h) = self.candidates.iter().find(|&&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::NonPositiveBandwidth(h));
        }
        if self.replicates < 2 {
            return Err(Error::InvalidArgument("need at least 2 bootstrap replicates".into()));
        }
        Ok(())
    }

    /// Candidates in ascending order without duplicates.
    pub fn sorted(&self) -> Vec<f64> {
        let mut c = self.candidates.clone();
        c.sort_by(f64::total_cmp);
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub h: f64,
    /// Bootstrap variance, the trace of the covariance for vector estimates.
    pub variance: f64,
    pub succeeded: usize,
    pub attempted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub h_star: f64,
    pub table: Vec<BandwidthRow>,
}

impl BandwidthSelection {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["h", "bootstrap_variance", "succeeded", "attempted", "selected"])?;
        for row in &self.table {
            w.write_record(&[
                row.h.to_string(),
                row.variance.to_string(),
                row.succeeded.to_string(),
                row.attempted.to_string(),
                u8::from(row.h == self.h_star).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trajectory-level resamples with replacement, one RNG stream per replicate.
pub fn resample_indices(n: usize, replicates: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..replicates)
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            (0..n).map(|_| rng.random_range(0..n)).collect()
        })
        .collect()
}

/// Sum over coordinates of the sample variance of the replicate estimates.
fn trace_variance(estimates: &[Vec<f64>]) -> f64 {
    let dim = estimates.first().map_or(0, Vec::len);
    (0..dim)
        .map(|k| {
            let col: Vec<f64> = estimates.iter().map(|e| e[k]).collect();
            crate::stats::variance(&col)
        })
        .sum()
}

/// Runs `estimator(resample, h)` on the same `B` resamples for every
/// candidate and returns the candidate with the smallest bootstrap variance.
/// Ties go to the smaller bandwidth. Failed replicates are dropped; fewer
/// than 80% successes for any candidate is an error.
pub fn select_bandwidth<F>(data: &Dataset, estimator: F, grid: &BandwidthGrid, seed: u64) -> Result<BandwidthSelection>
where
    F: Fn(&Dataset, f64) -> Result<EstimateReport> + Sync,
{
    grid.validate()?;
    let resamples = resample_indices(data.len(), grid.replicates, seed);
    let candidates = grid.sorted();
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..resamples.len()).map(move |b| (c, b)))
        .collect();
    let results: Vec<Option<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(c, b)| {
            let sample = data.subset(&resamples[b]);
            estimator(&sample, candidates[c]).ok().map(|r| r.estimate)
        })
        .collect();
    let b = resamples.len();
    let table = candidates
        .iter()
        .enumerate()
        .map(|(c, &h)| tabulate(h, results[c * b..(c + 1) * b].iter().flatten().cloned().collect(), b))
        .collect::<Result<Vec<_>>>()?;
    Ok(choose(table))
}

/// Summarizes the successful replicate estimates for one candidate.
pub(crate) fn tabulate(h: f64, ok: Vec<Vec<f64>>, attempted: usize) -> Result<BandwidthRow> {
    if (ok.len() as f64) < MIN_SUCCESS_RATE * attempted as f64 || ok.len() < 2 {
        return Err(Error::BootstrapFailure {
            succeeded: ok.len(),
            attempted,
        });
    }
    Ok(BandwidthRow {
        h,
        variance: trace_variance(&ok),
        succeeded: ok.len(),
        attempted,
    })
}

/// Argmin of the variance over a table sorted by ascending `h`; the first
/// (smallest) candidate wins ties.
pub(crate) fn choose(table: Vec<BandwidthRow>) -> BandwidthSelection {
    let mut best = 0;
    for (i, row) in table.iter().enumerate() {
        if row.variance < table[best].variance {
            best = i;
        }
    }
    BandwidthSelection {
        h_star: table[best].h,
        table,
    }
}
