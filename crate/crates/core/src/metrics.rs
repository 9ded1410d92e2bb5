//! Goodness-of-fit scores for quantile predictions.
//!
//! Predictions are aligned with observations: entry `i` holds the three
//! predicted quartiles at the day `t[i]` of observation `y[i]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::quantile_sorted;
use crate::curve::{day_bucket, DAY_BUCKETS};
use crate::error::MetricsError;
use crate::io::{fmt_f64, fmt_opt, TableWriter};
use crate::train::{pinball_term, QUANTILES};

pub const ROLLING_WINDOW: usize = 7;

/// Observations being scored.
#[derive(Debug, Clone, Copy)]
pub struct Observations<'a> {
    pub t: &'a [f64],
    pub y: &'a [f64],
}

impl<'a> Observations<'a> {
    pub fn new(t: &'a [f64], y: &'a [f64]) -> Result<Self, MetricsError> {
        if t.len() != y.len() {
            return Err(MetricsError::Misaligned { what: "days", expected: y.len(), got: t.len() });
        }
        if y.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(Self { t, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn check(&self, what: &'static str, pred: &[[f64; 3]]) -> Result<(), MetricsError> {
        if pred.len() != self.len() {
            return Err(MetricsError::Misaligned { what, expected: self.len(), got: pred.len() });
        }
        Ok(())
    }
}

/// Which residuals the median statistics were computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianMode {
    /// Predicted median against each observation.
    PerObservation,
    /// Mean predicted median against the empirical median, per day bucket.
    PerDayBucket,
}

impl MedianMode {
    pub fn name(self) -> &'static str {
        match self {
            MedianMode::PerObservation => "per_observation",
            MedianMode::PerDayBucket => "per_day_bucket",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianStats {
    pub mode: MedianMode,
    /// Number of residuals (observations or non-empty buckets).
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Mean prediction minus mean observation.
    pub bias: f64,
    /// `None` when the observations have zero variance.
    pub r2: Option<f64>,
}

impl MedianStats {
    /// Statistics of predictions `pred` against targets `obs`.
    pub fn compute(mode: MedianMode, pred: &[f64], obs: &[f64]) -> Self {
        debug_assert_eq!(pred.len(), obs.len());
        let n = obs.len() as f64;
        let (mut abs, mut sq, mut sum_p, mut sum_o) = (0.0, 0.0, 0.0, 0.0);
        for (&p, &o) in pred.iter().zip(obs) {
            let r = p - o;
            abs += r.abs();
            sq += r * r;
            sum_p += p;
            sum_o += o;
        }
        let mean_o = sum_o / n;
        let sst: f64 = obs.iter().map(|&o| (o - mean_o).powi(2)).sum();
        Self {
            mode,
            n: obs.len(),
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            bias: (sum_p - sum_o) / n,
            r2: (sst > 0.0).then(|| 1.0 - sq / sst),
        }
    }
}

/// Daily skill against a reference, with its circular rolling mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerDaySkill {
    pub reference: String,
    /// One D² triple per day bucket; `None` for empty buckets.
    pub d2: Vec<[Option<f64>; 3]>,
    pub rolling: Vec<[Option<f64>; 3]>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub reference: String,
    pub n_observations: usize,
    pub pinball: [f64; 3],
    pub reference_pinball: [f64; 3],
    /// `None` where the reference loss is zero.
    pub d2: [Option<f64>; 3],
    pub coverage: [f64; 3],
    pub median: MedianStats,
    pub median_per_day: MedianStats,
    pub per_day: Option<PerDaySkill>,
}

/// Pinball sums per quantile.
fn pinball_sums(pred: &[[f64; 3]], y: &[f64]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (p, &yi) in pred.iter().zip(y) {
        for q in 0..3 {
            s[q] += pinball_term(yi, p[q], QUANTILES[q]);
        }
    }
    s
}

fn skill(model: f64, reference: f64) -> Option<f64> {
    (reference > 0.0).then(|| 1.0 - model / reference)
}

/// Mean pinball loss per quantile.
pub fn pinball(pred: &[[f64; 3]], obs: &Observations) -> Result<[f64; 3], MetricsError> {
    obs.check("predictions", pred)?;
    let n = obs.len() as f64;
    Ok(pinball_sums(pred, obs.y).map(|s| s / n))
}

/// Fraction of observations at or below each predicted quantile.
pub fn coverage(pred: &[[f64; 3]], obs: &Observations) -> Result<[f64; 3], MetricsError> {
    obs.check("predictions", pred)?;
    let mut c = [0usize; 3];
    for (p, &y) in pred.iter().zip(obs.y) {
        for q in 0..3 {
            c[q] += usize::from(y <= p[q]);
        }
    }
    Ok(c.map(|k| k as f64 / obs.len() as f64))
}

fn median_per_day(pred: &[[f64; 3]], obs: &Observations) -> MedianStats {
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); DAY_BUCKETS];
    let mut ps = vec![0.0; DAY_BUCKETS];
    for (p, (&t, &y)) in pred.iter().zip(obs.t.iter().zip(obs.y)) {
        let b = day_bucket(t);
        ys[b].push(y);
        ps[b] += p[1];
    }
    let (mut pm, mut om) = (Vec::new(), Vec::new());
    for (b, v) in ys.iter_mut().enumerate() {
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        om.push(quantile_sorted(v, 0.5));
        pm.push(ps[b] / v.len() as f64);
    }
    MedianStats::compute(MedianMode::PerDayBucket, &pm, &om)
}

/// Scores `model` against `reference` on the same observations.
pub fn evaluate(
    model_name: &str,
    model: &[[f64; 3]],
    reference_name: &str,
    reference: &[[f64; 3]],
    obs: &Observations,
) -> Result<FitReport, MetricsError> {
    if obs.is_empty() {
        return Err(MetricsError::Empty);
    }
    obs.check("model predictions", model)?;
    obs.check("reference predictions", reference)?;
    let pb = pinball(model, obs)?;
    let rp = pinball(reference, obs)?;
    let medians: Vec<f64> = model.iter().map(|p| p[1]).collect();
    Ok(FitReport {
        model: model_name.to_string(),
        reference: reference_name.to_string(),
        n_observations: obs.len(),
        pinball: pb,
        reference_pinball: rp,
        d2: [0, 1, 2].map(|q| skill(pb[q], rp[q])),
        coverage: coverage(model, obs)?,
        median: MedianStats::compute(MedianMode::PerObservation, &medians, obs.y),
        median_per_day: median_per_day(model, obs),
        per_day: None,
    })
}

/// Circular centred rolling mean over the defined entries of `series`.
pub fn circular_rolling_mean(series: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let n = series.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let (mut sum, mut k) = (0.0, 0usize);
            for off in 0..window.min(n) {
                if let Some(v) = series[(i + n + off - half) % n] {
                    sum += v;
                    k += 1;
                }
            }
            (k > 0).then(|| sum / k as f64)
        })
        .collect()
}

/// D² per day bucket against `climatology`.
pub fn per_day_skill(
    model: &[[f64; 3]],
    climatology: &[[f64; 3]],
    obs: &Observations,
) -> Result<PerDaySkill, MetricsError> {
    obs.check("model predictions", model)?;
    obs.check("climatology predictions", climatology)?;
    let mut m = vec![[0.0; 3]; DAY_BUCKETS];
    let mut c = vec![[0.0; 3]; DAY_BUCKETS];
    let mut counts = vec![0usize; DAY_BUCKETS];
    for i in 0..obs.len() {
        let b = day_bucket(obs.t[i]);
        counts[b] += 1;
        for q in 0..3 {
            m[b][q] += pinball_term(obs.y[i], model[i][q], QUANTILES[q]);
            c[b][q] += pinball_term(obs.y[i], climatology[i][q], QUANTILES[q]);
        }
    }
    let d2: Vec<[Option<f64>; 3]> = (0..DAY_BUCKETS)
        .map(|b| [0, 1, 2].map(|q| if counts[b] == 0 { None } else { skill(m[b][q], c[b][q]) }))
        .collect();
    let mut rolling = vec![[None; 3]; DAY_BUCKETS];
    for q in 0..3 {
        let series: Vec<Option<f64>> = d2.iter().map(|d| d[q]).collect();
        for (b, v) in circular_rolling_mean(&series, ROLLING_WINDOW).into_iter().enumerate() {
            rolling[b][q] = v;
        }
    }
    Ok(PerDaySkill { reference: "climatology".into(), d2, rolling, counts })
}

pub const SUMMARY_COLUMNS: [&str; 19] = [
    "model",
    "reference",
    "pinball_q25",
    "pinball_q50",
    "pinball_q75",
    "d2_q25",
    "d2_q50",
    "d2_q75",
    "coverage_q25",
    "coverage_q50",
    "coverage_q75",
    "median_mode",
    "mae",
    "rmse",
    "bias",
    "r2",
    "mae_per_day",
    "rmse_per_day",
    "r2_per_day",
];

/// One row per report in the pinball / D² / coverage / median layout.
pub fn write_summary<W: Write>(out: W, command: &str, reports: &[FitReport]) -> std::io::Result<W> {
    let mut w = TableWriter::new(out, command, &SUMMARY_COLUMNS)?;
    for r in reports {
        let mut row = vec![r.model.clone(), r.reference.clone()];
        row.extend(r.pinball.iter().map(|&v| fmt_f64(v)));
        row.extend(r.d2.iter().map(|&v| fmt_opt(v)));
        row.extend(r.coverage.iter().map(|&v| fmt_f64(v)));
        row.push(r.median.mode.name().to_string());
        row.extend([fmt_f64(r.median.mae), fmt_f64(r.median.rmse), fmt_f64(r.median.bias), fmt_opt(r.median.r2)]);
        row.extend([fmt_f64(r.median_per_day.mae), fmt_f64(r.median_per_day.rmse), fmt_opt(r.median_per_day.r2)]);
        w.row(&row)?;
    }
    w.finish()
}

/// Daily skill table: `bucket, count, d2_q.., rolling_q..`.
pub fn write_per_day<W: Write>(out: W, command: &str, s: &PerDaySkill) -> std::io::Result<W> {
    let cols = ["bucket", "count", "d2_q25", "d2_q50", "d2_q75", "rolling_q25", "rolling_q50", "rolling_q75"];
    let mut w = TableWriter::new(out, command, &cols)?;
    for b in 0..s.d2.len() {
        let mut row = vec![b.to_string(), s.counts[b].to_string()];
        row.extend(s.d2[b].iter().map(|&v| fmt_opt(v)));
        row.extend(s.rolling[b].iter().map(|&v| fmt_opt(v)));
        w.row(&row)?;
    }
    w.finish()
}
