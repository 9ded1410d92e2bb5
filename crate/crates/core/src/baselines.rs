//! Reference models for skill scores: one quantile triple for the whole
//! corpus, or one per day of year.

use serde::{Deserialize, Serialize};

use crate::curve::{day_bucket, DAY_BUCKETS};
use crate::error::BaselineError;

/// Type-7 (linear interpolation between order statistics) sample quantile of
/// sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample quartiles `(0.25, 0.5, 0.75)`; sorts `values` in place.
pub fn quartiles(values: &mut [f64]) -> Option<[f64; 3]> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some([0.25, 0.5, 0.75].map(|q| quantile_sorted(values, q)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBaseline {
    pub quantiles: [f64; 3],
    pub n_observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimatologyBaseline {
    /// One quantile triple per day-of-year bucket.
    pub quantiles: Vec<[f64; 3]>,
    /// Observations that fell into each bucket; buckets with zero count
    /// were interpolated from their neighbours.
    pub counts: Vec<usize>,
}

pub fn fit_global(ndvi: &[f64]) -> Result<GlobalBaseline, BaselineError> {
    let mut v = ndvi.to_vec();
    let quantiles = quartiles(&mut v).ok_or(BaselineError::Empty)?;
    Ok(GlobalBaseline { quantiles, n_observations: ndvi.len() })
}

/// Per-bucket quartiles of the observations at normalized days `t`. Empty
/// buckets are filled by linear interpolation between the nearest non-empty
/// buckets, wrapping around the year end.
pub fn fit_climatology(t: &[f64], ndvi: &[f64]) -> Result<ClimatologyBaseline, BaselineError> {
    assert_eq!(t.len(), ndvi.len(), "days and values must align");
    if ndvi.is_empty() {
        return Err(BaselineError::Empty);
    }
    let mut per_bucket: Vec<Vec<f64>> = vec![Vec::new(); DAY_BUCKETS];
    for (&ti, &y) in t.iter().zip(ndvi) {
        per_bucket[day_bucket(ti)].push(y);
    }
    let counts: Vec<usize> = per_bucket.iter().map(Vec::len).collect();
    let filled: Vec<Option<[f64; 3]>> = per_bucket.iter_mut().map(|v| quartiles(v)).collect();
    let known: Vec<usize> = (0..DAY_BUCKETS).filter(|&b| filled[b].is_some()).collect();

    let mut quantiles = vec![[0.0; 3]; DAY_BUCKETS];
    for b in 0..DAY_BUCKETS {
        if let Some(q) = filled[b] {
            quantiles[b] = q;
            continue;
        }
        // nearest known bucket on each side, circularly
        let next = known.iter().copied().find(|&k| k > b).unwrap_or(known[0]);
        let prev = known.iter().rev().copied().find(|&k| k < b).unwrap_or(*known.last().unwrap());
        let span = (next + DAY_BUCKETS - prev) % DAY_BUCKETS;
        let (qa, qb) = (filled[prev].unwrap(), filled[next].unwrap());
        if span == 0 {
            quantiles[b] = qa;
            continue;
        }
        let frac = ((b + DAY_BUCKETS - prev) % DAY_BUCKETS) as f64 / span as f64;
        for k in 0..3 {
            quantiles[b][k] = qa[k] + frac * (qb[k] - qa[k]);
        }
    }
    Ok(ClimatologyBaseline { quantiles, counts })
}

impl GlobalBaseline {
    pub fn predict(&self, _t: f64) -> [f64; 3] {
        self.quantiles
    }
}

impl ClimatologyBaseline {
    pub fn predict(&self, t: f64) -> [f64; 3] {
        self.quantiles[day_bucket(t)]
    }
}
