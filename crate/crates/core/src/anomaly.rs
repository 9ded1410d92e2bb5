//! Anomaly scores relative to the predicted interquartile range, and their
//! aggregations over days, pixels, dates and areas.
//!
//! The score of an observation `y` at day `t` is
//! `(y - f25(t)) / (f75(t) - f25(t))`; values below the threshold mark a
//! negative (browning) anomaly.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::quantile_sorted;
use crate::curve::{day_bucket, DAY_BUCKETS};
use crate::dataset::Dataset;
use crate::error::{AnomalyError, FormatError};
use crate::io::{fmt_f64, fmt_opt, Table, TableWriter};
use crate::metrics::{circular_rolling_mean, ROLLING_WINDOW};
use crate::QuantileCurveSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    /// Scores strictly below this are negative anomalies.
    pub threshold: f64,
    /// Records whose IQR is below this are unusable.
    pub iqr_floor: f64,
    /// Also flag `y > f75 + |threshold| * IQR`.
    pub flag_positive: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self { threshold: -1.5, iqr_floor: 1e-3, flag_positive: false }
    }
}

impl AnomalyConfig {
    /// Score above which a positive anomaly is flagged.
    pub fn upper_threshold(&self) -> f64 {
        1.0 - self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub pixel_id: u64,
    pub date: NaiveDate,
    pub ndvi: f64,
    /// `None` when the record is unusable.
    pub score: Option<f64>,
    pub is_negative_anomaly: bool,
    pub is_positive_anomaly: bool,
    pub f25: f64,
    pub f75: f64,
}

impl AnomalyRecord {
    pub fn iqr(&self) -> f64 {
        self.f75 - self.f25
    }

    pub fn usable(&self) -> bool {
        self.score.is_some()
    }
}

/// Scores one observation against its pixel's curves.
pub fn score(
    pixel_id: u64,
    date: NaiveDate,
    ndvi: f64,
    curves: &QuantileCurveSet,
    cfg: &AnomalyConfig,
) -> AnomalyRecord {
    let t = crate::curve::day_fraction(date);
    let f25 = curves.lower().value_unchecked(t);
    let f75 = curves.upper().value_unchecked(t);
    score_values(pixel_id, date, ndvi, f25, f75, cfg)
}

/// Scores `ndvi` against given quartile values.
pub fn score_values(
    pixel_id: u64,
    date: NaiveDate,
    ndvi: f64,
    f25: f64,
    f75: f64,
    cfg: &AnomalyConfig,
) -> AnomalyRecord {
    let iqr = f75 - f25;
    let score = (iqr >= cfg.iqr_floor).then(|| (ndvi - f25) / iqr);
    AnomalyRecord {
        pixel_id,
        date,
        ndvi,
        score,
        is_negative_anomaly: score.is_some_and(|s| s < cfg.threshold),
        is_positive_anomaly: cfg.flag_positive && score.is_some_and(|s| s > cfg.upper_threshold()),
        f25,
        f75,
    }
}

/// Scores every observation in `ds`, in dataset order. `curves[i]` belongs
/// to pixel `i`.
pub fn score_dataset(
    ds: &Dataset,
    curves: &[QuantileCurveSet],
    cfg: &AnomalyConfig,
) -> Result<Vec<AnomalyRecord>, AnomalyError> {
    if curves.len() != ds.n_pixels() {
        let missing = ds.pixels.get(curves.len()).map_or(0, |p| p.pixel_id);
        return Err(AnomalyError::MissingCurves(missing));
    }
    let per_pixel: Vec<Vec<AnomalyRecord>> = (0..ds.n_pixels())
        .into_par_iter()
        .map(|i| {
            let id = ds.pixels[i].pixel_id;
            ds.observation_range(i)
                .map(|j| {
                    let [f25, _, f75] = curves[i].values_unchecked(ds.t[j]);
                    score_values(id, ds.dates[j], ds.ndvi[j], f25, f75, cfg)
                })
                .collect()
        })
        .collect();
    Ok(per_pixel.into_iter().flatten().collect())
}

/// Scores every observation in `ds` against quartiles already evaluated
/// at each observation, as returned by
/// [`Model::predict_dataset`](crate::checkpoint::Model::predict_dataset).
pub fn score_predicted(ds: &Dataset, predicted: &[[f64; 3]], cfg: &AnomalyConfig) -> Vec<AnomalyRecord> {
    assert_eq!(predicted.len(), ds.n_observations(), "one prediction per observation");
    (0..ds.n_pixels())
        .flat_map(|i| {
            let id = ds.pixels[i].pixel_id;
            ds.observation_range(i)
                .map(move |j| score_values(id, ds.dates[j], ds.ndvi[j], predicted[j][0], predicted[j][2], cfg))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyFraction {
    pub flagged: Vec<usize>,
    pub usable: Vec<usize>,
    /// `None` for buckets with no usable record.
    pub fraction: Vec<Option<f64>>,
    pub rolling: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

/// Fraction of usable records flagged, per day-of-year bucket.
pub fn daily_fraction(records: &[AnomalyRecord]) -> DailyFraction {
    let mut flagged = vec![0usize; DAY_BUCKETS];
    let mut usable = vec![0usize; DAY_BUCKETS];
    for r in records.iter().filter(|r| r.usable()) {
        let b = day_bucket(crate::curve::day_fraction(r.date));
        usable[b] += 1;
        flagged[b] += usize::from(r.is_negative_anomaly);
    }
    let fraction: Vec<Option<f64>> =
        flagged.iter().zip(&usable).map(|(&f, &u)| (u > 0).then(|| f as f64 / u as f64)).collect();
    let (tf, tu): (usize, usize) = (flagged.iter().sum(), usable.iter().sum());
    DailyFraction {
        rolling: circular_rolling_mean(&fraction, ROLLING_WINDOW),
        overall: (tu > 0).then(|| tf as f64 / tu as f64),
        flagged,
        usable,
        fraction,
    }
}

pub const HISTOGRAM_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelFraction {
    pub pixel_id: u64,
    pub flagged: usize,
    pub usable: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelFractions {
    pub pixels: Vec<PixelFraction>,
    /// Counts per bin of width 0.01; a fraction of exactly 1 falls in the
    /// last bin.
    pub histogram: Vec<usize>,
    /// Pixels with records but none usable.
    pub excluded: usize,
}

/// Bin index of `flagged / usable`, computed without rounding error.
pub fn histogram_bin(flagged: usize, usable: usize) -> usize {
    (flagged * HISTOGRAM_BINS / usable).min(HISTOGRAM_BINS - 1)
}

/// Per-pixel flagged fraction, sorted by pixel id.
pub fn pixel_fraction(records: &[AnomalyRecord]) -> PixelFractions {
    let mut tally: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = tally.entry(r.pixel_id).or_default();
        if r.usable() {
            e.1 += 1;
            e.0 += usize::from(r.is_negative_anomaly);
        }
    }
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    let mut excluded = 0;
    let mut pixels = Vec::with_capacity(tally.len());
    for (pixel_id, (flagged, usable)) in tally {
        if usable == 0 {
            excluded += 1;
            continue;
        }
        histogram[histogram_bin(flagged, usable)] += 1;
        pixels.push(PixelFraction { pixel_id, flagged, usable, fraction: flagged as f64 / usable as f64 });
    }
    PixelFractions { pixels, histogram, excluded }
}

/// How flags from several dates combine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Flagged on any date.
    #[default]
    Any,
    /// Flagged on every usable date.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotCell {
    pub pixel_id: u64,
    pub flagged: bool,
    /// Most negative usable score in the window.
    pub score: Option<f64>,
    pub n_records: usize,
}

/// Per-pixel flag and minimum score over the records dated in `dates`.
pub fn snapshot_map(records: &[AnomalyRecord], dates: &[NaiveDate], rule: MergeRule) -> Vec<SnapshotCell> {
    let window: HashSet<NaiveDate> = dates.iter().copied().collect();
    let mut cells: BTreeMap<u64, (usize, usize, usize, Option<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| window.contains(&r.date)) {
        let e = cells.entry(r.pixel_id).or_default();
        e.0 += 1;
        if let Some(s) = r.score {
            e.1 += 1;
            e.2 += usize::from(r.is_negative_anomaly);
            e.3 = Some(e.3.map_or(s, |m: f64| m.min(s)));
        }
    }
    cells
        .into_iter()
        .map(|(pixel_id, (n, usable, flagged, score))| SnapshotCell {
            pixel_id,
            flagged: match rule {
                MergeRule::Any => flagged > 0,
                MergeRule::All => usable > 0 && flagged == usable,
            },
            score,
            n_records: n,
        })
        .collect()
}

/// ASCII grid of a snapshot: `#` flagged, `.` not flagged, `?` no usable
/// score, space for no record. Rows and columns span the given positions.
pub fn render_grid(cells: &[SnapshotCell], positions: &HashMap<u64, (i64, i64)>) -> String {
    if positions.is_empty() {
        return String::new();
    }
    let r0 = positions.values().map(|p| p.0).min().unwrap();
    let r1 = positions.values().map(|p| p.0).max().unwrap();
    let c0 = positions.values().map(|p| p.1).min().unwrap();
    let c1 = positions.values().map(|p| p.1).max().unwrap();
    let width = (c1 - c0 + 1) as usize;
    let mut grid = vec![vec![b' '; width]; (r1 - r0 + 1) as usize];
    for c in cells {
        if let Some(&(r, col)) = positions.get(&c.pixel_id) {
            grid[(r - r0) as usize][(col - c0) as usize] = match (c.flagged, c.score) {
                (true, _) => b'#',
                (false, Some(_)) => b'.',
                (false, None) => b'?',
            };
        }
    }
    let mut out = String::with_capacity(grid.len() * (width + 1));
    for row in grid {
        out.push_str(String::from_utf8(row).unwrap().trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePoint {
    pub date: NaiveDate,
    pub usable: usize,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudySeries {
    pub affected: Vec<CasePoint>,
    pub control: Vec<CasePoint>,
}

fn area_series(records: &[AnomalyRecord], set: &HashSet<u64>) -> Vec<CasePoint> {
    let mut per_date: BTreeMap<NaiveDate, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| set.contains(&r.pixel_id)) {
        if let Some(s) = r.score {
            let e = per_date.entry(r.date).or_default();
            e.0.push(s);
            e.1 += usize::from(r.is_negative_anomaly);
        }
    }
    per_date
        .into_iter()
        .map(|(date, (mut scores, flagged))| {
            scores.sort_by(f64::total_cmp);
            CasePoint {
                date,
                usable: scores.len(),
                p25: quantile_sorted(&scores, 0.25),
                median: quantile_sorted(&scores, 0.5),
                p75: quantile_sorted(&scores, 0.75),
                fraction: flagged as f64 / scores.len() as f64,
            }
        })
        .collect()
}

/// Score percentiles and flagged fraction per date, for two pixel sets.
pub fn case_study(
    records: &[AnomalyRecord],
    affected: &[u64],
    control: &[u64],
) -> Result<CaseStudySeries, AnomalyError> {
    if affected.is_empty() {
        return Err(AnomalyError::EmptyPixelSet("affected"));
    }
    if control.is_empty() {
        return Err(AnomalyError::EmptyPixelSet("control"));
    }
    let a: HashSet<u64> = affected.iter().copied().collect();
    let c: HashSet<u64> = control.iter().copied().collect();
    Ok(CaseStudySeries { affected: area_series(records, &a), control: area_series(records, &c) })
}

/// Distinct dates present in `records`, ascending.
pub fn record_dates(records: &[AnomalyRecord]) -> Vec<NaiveDate> {
    records.iter().map(|r| r.date).collect::<BTreeSet<_>>().into_iter().collect()
}

pub const RECORD_COLUMNS: [&str; 8] = ["pixel_id", "date", "ndvi", "score", "flag", "f25", "f75", "positive_flag"];

pub fn write_records<W: Write>(out: W, command: &str, records: &[AnomalyRecord]) -> std::io::Result<W> {
    let mut w = TableWriter::new(out, command, &RECORD_COLUMNS)?;
    for r in records {
        w.row(&[
            r.pixel_id.to_string(),
            r.date.to_string(),
            fmt_f64(r.ndvi),
            fmt_opt(r.score),
            u8::from(r.is_negative_anomaly).to_string(),
            fmt_f64(r.f25),
            fmt_f64(r.f75),
            u8::from(r.is_positive_anomaly).to_string(),
        ])?;
    }
    w.finish()
}

pub fn read_records(table: &Table) -> Result<Vec<AnomalyRecord>, FormatError> {
    let col: Vec<usize> = RECORD_COLUMNS.iter().map(|c| table.column(c)).collect::<Result<_, _>>()?;
    table
        .rows
        .iter()
        .map(|row| {
            let score = &row.1[col[3]];
            Ok(AnomalyRecord {
                pixel_id: table.get(row, col[0])?,
                date: table.get(row, col[1])?,
                ndvi: table.get(row, col[2])?,
                score: if score == crate::io::UNDEFINED { None } else { Some(table.get(row, col[3])?) },
                is_negative_anomaly: table.get::<u8>(row, col[4])? == 1,
                f25: table.get(row, col[5])?,
                f75: table.get(row, col[6])?,
                is_positive_anomaly: table.get::<u8>(row, col[7])? == 1,
            })
        })
        .collect()
}

pub fn write_daily<W: Write>(out: W, command: &str, d: &DailyFraction) -> std::io::Result<W> {
    let mut w = TableWriter::new(out, command, &["bucket", "flagged", "usable", "fraction", "rolling"])?;
    for b in 0..d.fraction.len() {
        w.row(&[
            b.to_string(),
            d.flagged[b].to_string(),
            d.usable[b].to_string(),
            fmt_opt(d.fraction[b]),
            fmt_opt(d.rolling[b]),
        ])?;
    }
    w.finish()
}

pub fn write_pixel_fractions<W: Write>(out: W, command: &str, p: &PixelFractions) -> std::io::Result<W> {
    let mut w = TableWriter::new(out, command, &["pixel_id", "flagged", "usable", "fraction"])?;
    for px in &p.pixels {
        w.row(&[px.pixel_id.to_string(), px.flagged.to_string(), px.usable.to_string(), fmt_f64(px.fraction)])?;
    }
    w.finish()
}

pub fn write_histogram<W: Write>(out: W, command: &str, p: &PixelFractions) -> std::io::Result<W> {
    let mut w = TableWriter::new(out, command, &["bin_low", "bin_high", "pixels"])?;
    for (b, &n) in p.histogram.iter().enumerate() {
        let lo = b as f64 / HISTOGRAM_BINS as f64;
        let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
        w.row(&[fmt_f64(lo), fmt_f64(hi), n.to_string()])?;
    }
    w.finish()
}

pub fn write_snapshot<W: Write>(out: W, command: &str, cells: &[SnapshotCell]) -> std::io::Result<W> {
    let mut w = TableWriter::new(out, command, &["pixel_id", "flag", "score", "records"])?;
    for c in cells {
        w.row(&[c.pixel_id.to_string(), u8::from(c.flagged).to_string(), fmt_opt(c.score), c.n_records.to_string()])?;
    }
    w.finish()
}

pub fn write_case_study<W: Write>(out: W, command: &str, s: &CaseStudySeries) -> std::io::Result<W> {
    let mut w = TableWriter::new(out, command, &["area", "date", "usable", "p25", "median", "p75", "fraction"])?;
    for (area, pts) in [("affected", &s.affected), ("control", &s.control)] {
        for p in pts {
            w.row(&[
                area.to_string(),
                p.date.to_string(),
                p.usable.to_string(),
                fmt_f64(p.p25),
                fmt_f64(p.median),
                fmt_f64(p.p75),
                fmt_f64(p.fraction),
            ])?;
        }
    }
    w.finish()
}
