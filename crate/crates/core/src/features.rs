//! Observation filtering and covariate preprocessing.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::curve::day_fraction;
use crate::error::FeatureError;

/// Continuous covariates, in column order.
pub const CONTINUOUS_FEATURES: [&str; 12] = [
    "forest_height",
    "forest_mix_rate",
    "elevation",
    "slope",
    "eastness",
    "northness",
    "twi",
    "tri",
    "mean_curvature",
    "profile_curvature",
    "plan_curvature",
    "roughness",
];

pub const N_CONTINUOUS: usize = CONTINUOUS_FEATURES.len();

#[cfg(test)]
const HEIGHT: usize = 0;
const MIX_RATE: usize = 1;
const EASTNESS: usize = 4;
const NORTHNESS: usize = 5;

/// Dense index reserved for missing or unseen categories.
pub const UNKNOWN: usize = 0;

/// Sub-pixel count of the habitat map inside one pixel.
pub const HABITAT_SUBPIXELS: u32 = 100;

/// NDSI at or above this value marks snow.
pub const SNOW_NDSI: f64 = 0.43;

/// Valid NDVI range; values outside are outliers.
pub const NDVI_RANGE: (f64, f64) = (-0.1, 1.0);

/// Covariates of one pixel as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPixelRecord {
    pub pixel_id: u64,
    pub continuous: [Option<f64>; N_CONTINUOUS],
    pub species: Option<String>,
    pub habitat_counts: BTreeMap<String, u32>,
    /// Grid position, when the source provides one.
    pub position: Option<(i64, i64)>,
}

impl RawPixelRecord {
    fn validate(&self) -> Result<(), String> {
        for (name, v) in CONTINUOUS_FEATURES.iter().zip(&self.continuous) {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(format!("{name} is not finite"));
                }
            }
        }
        for idx in [EASTNESS, NORTHNESS] {
            if let Some(v) = self.continuous[idx] {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(format!("{} = {v} outside [-1, 1]", CONTINUOUS_FEATURES[idx]));
                }
            }
        }
        let total: u64 = self.habitat_counts.values().map(|&c| u64::from(c)).sum();
        if total > u64::from(HABITAT_SUBPIXELS) {
            return Err(format!("habitat counts sum to {total} > {HABITAT_SUBPIXELS}"));
        }
        Ok(())
    }
}

/// Model-ready covariates of one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelFeatures {
    pub pixel_id: u64,
    pub continuous: Vec<f64>,
    pub species: usize,
    /// `(habitat index, weight)` pairs sorted by index, weights summing to 1.
    pub habitats: Vec<(usize, f64)>,
}

/// A problem with one input record; the record is skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordIssue {
    pub index: usize,
    pub pixel_id: Option<u64>,
    pub message: String,
}

/// Quality mask bits attached to an acquisition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct MaskFlags(pub u8);

impl MaskFlags {
    pub const NO_DATA: u8 = 1;
    pub const CLOUD: u8 = 2;
    pub const CLOUD_SHADOW: u8 = 4;
    pub const TERRAIN_SHADOW: u8 = 8;

    pub fn contains(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn is_clear(self) -> bool {
        self.0 == 0
    }
}

/// One acquisition before filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RawObservation {
    pub pixel_id: u64,
    pub date: NaiveDate,
    pub ndvi: Option<f64>,
    pub ndsi: Option<f64>,
    pub flags: MaskFlags,
}

/// One retained greenness observation.
#[derive(Debug, Clone, PartialEq)]
pub struct NdviObservation {
    pub pixel_id: u64,
    pub date: NaiveDate,
    pub t: f64,
    pub ndvi: f64,
    pub ndsi: Option<f64>,
    pub flags: MaskFlags,
}

impl From<&NdviObservation> for RawObservation {
    fn from(o: &NdviObservation) -> Self {
        Self { pixel_id: o.pixel_id, date: o.date, ndvi: Some(o.ndvi), ndsi: o.ndsi, flags: o.flags }
    }
}

/// Why an observation was dropped. Declaration order is the order in which
/// rules are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rejection {
    NoData,
    Cloud,
    CloudShadow,
    TerrainShadow,
    Snow,
    Outlier,
}

impl Rejection {
    pub const ALL: [Rejection; 6] = [
        Rejection::NoData,
        Rejection::Cloud,
        Rejection::CloudShadow,
        Rejection::TerrainShadow,
        Rejection::Snow,
        Rejection::Outlier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rejection::NoData => "no_data",
            Rejection::Cloud => "cloud",
            Rejection::CloudShadow => "cloud_shadow",
            Rejection::TerrainShadow => "terrain_shadow",
            Rejection::Snow => "snow",
            Rejection::Outlier => "outlier",
        }
    }
}

/// First failing rule, or `None` if the observation is kept.
pub fn rejection_reason(ndvi: f64, ndsi: f64, flags: MaskFlags) -> Option<Rejection> {
    if flags.contains(MaskFlags::NO_DATA) {
        Some(Rejection::NoData)
    } else if flags.contains(MaskFlags::CLOUD) {
        Some(Rejection::Cloud)
    } else if flags.contains(MaskFlags::CLOUD_SHADOW) {
        Some(Rejection::CloudShadow)
    } else if flags.contains(MaskFlags::TERRAIN_SHADOW) {
        Some(Rejection::TerrainShadow)
    } else if !flags.is_clear() {
        // unknown bits count as missing data
        Some(Rejection::NoData)
    } else if ndsi >= SNOW_NDSI {
        Some(Rejection::Snow)
    } else if !(NDVI_RANGE.0..=NDVI_RANGE.1).contains(&ndvi) {
        Some(Rejection::Outlier)
    } else {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub retained: Vec<NdviObservation>,
    /// Rejection count per rule, indexed like [`Rejection::ALL`].
    pub tally: [usize; 6],
    pub errors: Vec<RecordIssue>,
}

impl FilterOutcome {
    pub fn rejected(&self, reason: Rejection) -> usize {
        self.tally[reason as usize]
    }
}

/// Applies the quality masks, the snow threshold and the NDVI outlier range.
pub fn filter_observations(raw: &[RawObservation]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for (index, obs) in raw.iter().enumerate() {
        let (ndvi, ndsi) = match (obs.ndvi, obs.ndsi) {
            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => (a, b),
            _ => {
                if !obs.flags.is_clear() {
                    // masked records routinely carry no values
                    let r = rejection_reason(0.0, 0.0, obs.flags).unwrap();
                    out.tally[r as usize] += 1;
                } else {
                    out.errors.push(RecordIssue {
                        index,
                        pixel_id: Some(obs.pixel_id),
                        message: "missing or non-finite ndvi/ndsi".into(),
                    });
                }
                continue;
            }
        };
        match rejection_reason(ndvi, ndsi, obs.flags) {
            Some(r) => out.tally[r as usize] += 1,
            None => out.retained.push(NdviObservation {
                pixel_id: obs.pixel_id,
                date: obs.date,
                t: day_fraction(obs.date),
                ndvi,
                ndsi: Some(ndsi),
                flags: obs.flags,
            }),
        }
    }
    out
}

/// Everything learned from the training corpus that is needed to turn raw
/// covariates into model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub impute: Vec<f64>,
    /// Species codes; code `species[i]` has dense index `i + 1`.
    pub species: Vec<String>,
    /// Habitat codes; code `habitats[i]` has dense index `i + 1`.
    pub habitats: Vec<String>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Learns standardization moments, imputation values and category
/// dictionaries. Malformed records are ignored.
pub fn fit_preprocessor(corpus: &[RawPixelRecord]) -> Result<PreprocessorState, FeatureError> {
    let valid: Vec<&RawPixelRecord> = corpus.iter().filter(|r| r.validate().is_ok()).collect();
    if valid.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut means = Vec::with_capacity(N_CONTINUOUS);
    let mut stds = Vec::with_capacity(N_CONTINUOUS);
    let mut impute = Vec::with_capacity(N_CONTINUOUS);
    for (k, name) in CONTINUOUS_FEATURES.iter().enumerate() {
        let mut col: Vec<f64> = valid.iter().filter_map(|r| r.continuous[k]).collect();
        if col.is_empty() {
            return Err(FeatureError::AllMissing(name));
        }
        let mu = mean(&col);
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / col.len() as f64;
        let sd = var.sqrt();
        means.push(mu);
        stds.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
        // forest mix rate takes the median, everything else the mean
        impute.push(if k == MIX_RATE { median(&mut col) } else { mu });
    }

    let mut species: Vec<String> = valid.iter().filter_map(|r| r.species.clone()).collect();
    species.sort();
    species.dedup();
    let mut habitats: Vec<String> =
        valid.iter().flat_map(|r| r.habitat_counts.iter().filter(|(_, &c)| c > 0).map(|(k, _)| k.clone())).collect();
    habitats.sort();
    habitats.dedup();

    Ok(PreprocessorState {
        feature_names: CONTINUOUS_FEATURES.iter().map(|s| s.to_string()).collect(),
        means,
        stds,
        impute,
        species,
        habitats,
    })
}

impl PreprocessorState {
    pub fn n_species(&self) -> usize {
        self.species.len() + 1
    }

    pub fn n_habitats(&self) -> usize {
        self.habitats.len() + 1
    }

    pub fn species_index(&self, code: Option<&str>) -> usize {
        code.and_then(|c| self.species.binary_search_by(|s| s.as_str().cmp(c)).ok()).map_or(UNKNOWN, |i| i + 1)
    }

    pub fn habitat_index(&self, code: &str) -> usize {
        self.habitats.binary_search_by(|s| s.as_str().cmp(code)).map_or(UNKNOWN, |i| i + 1)
    }

    /// Standardized value of feature `k`; missing values are imputed first.
    pub fn standardize(&self, k: usize, value: Option<f64>) -> f64 {
        (value.unwrap_or(self.impute[k]) - self.means[k]) / self.stds[k]
    }

    pub fn destandardize(&self, k: usize, z: f64) -> f64 {
        z * self.stds[k] + self.means[k]
    }

    fn apply_one(&self, r: &RawPixelRecord) -> PixelFeatures {
        let continuous = (0..N_CONTINUOUS).map(|k| self.standardize(k, r.continuous[k])).collect();
        let total: u32 = r.habitat_counts.values().sum();
        let habitats = if total == 0 {
            vec![(UNKNOWN, 1.0)]
        } else {
            let mut acc: BTreeMap<usize, u32> = BTreeMap::new();
            for (code, &c) in &r.habitat_counts {
                if c > 0 {
                    *acc.entry(self.habitat_index(code)).or_default() += c;
                }
            }
            acc.into_iter().map(|(h, c)| (h, f64::from(c) / f64::from(total))).collect()
        };
        PixelFeatures { pixel_id: r.pixel_id, continuous, species: self.species_index(r.species.as_deref()), habitats }
    }
}

/// Standardizes covariates and encodes categories. Malformed records are
/// skipped and reported.
pub fn apply_preprocessor(
    state: &PreprocessorState,
    records: &[RawPixelRecord],
) -> (Vec<PixelFeatures>, Vec<RecordIssue>) {
    let mut out = Vec::with_capacity(records.len());
    let mut issues = Vec::new();
    for (index, r) in records.iter().enumerate() {
        match r.validate() {
            Ok(()) => out.push(state.apply_one(r)),
            Err(message) => issues.push(RecordIssue { index, pixel_id: Some(r.pixel_id), message }),
        }
    }
    (out, issues)
}
