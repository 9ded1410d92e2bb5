//! Pixels with their observations attached, laid out for training.

use std::collections::HashMap;

use chrono::NaiveDate;

use crate::curve::day_bucket;
use crate::features::{
    apply_preprocessor, filter_observations, NdviObservation, PixelFeatures, PreprocessorState, RawObservation,
    RawPixelRecord, RecordIssue,
};

/// Pixels plus their observations in compressed-row form: the observations
/// of pixel `i` occupy `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<PixelFeatures>,
    pub offsets: Vec<usize>,
    pub t: Vec<f64>,
    pub ndvi: Vec<f64>,
    pub dates: Vec<NaiveDate>,
}

impl Dataset {
    /// Groups observations under their pixels. Observations of pixels absent
    /// from `pixels` are dropped; the count is returned alongside. Within a
    /// pixel, observations keep their input order.
    pub fn assemble(pixels: Vec<PixelFeatures>, observations: &[NdviObservation]) -> (Self, usize) {
        let index: HashMap<u64, usize> = pixels.iter().enumerate().map(|(i, p)| (p.pixel_id, i)).collect();
        let mut per_pixel: Vec<Vec<&NdviObservation>> = vec![Vec::new(); pixels.len()];
        let mut orphans = 0;
        for o in observations {
            match index.get(&o.pixel_id) {
                Some(&i) => per_pixel[i].push(o),
                None => orphans += 1,
            }
        }
        let n_obs = observations.len() - orphans;
        let mut ds = Dataset {
            offsets: Vec::with_capacity(pixels.len() + 1),
            t: Vec::with_capacity(n_obs),
            ndvi: Vec::with_capacity(n_obs),
            dates: Vec::with_capacity(n_obs),
            pixels,
        };
        ds.offsets.push(0);
        for obs in per_pixel {
            for o in obs {
                ds.t.push(o.t);
                ds.ndvi.push(o.ndvi);
                ds.dates.push(o.date);
            }
            ds.offsets.push(ds.t.len());
        }
        (ds, orphans)
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels.len()
    }

    pub fn n_observations(&self) -> usize {
        self.t.len()
    }

    pub fn observation_range(&self, pixel: usize) -> std::ops::Range<usize> {
        self.offsets[pixel]..self.offsets[pixel + 1]
    }

    /// Pixel index of every observation.
    pub fn observation_pixels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_observations());
        for i in 0..self.n_pixels() {
            out.extend(std::iter::repeat_n(i, self.observation_range(i).len()));
        }
        out
    }

    /// Day-of-year bucket of every observation.
    pub fn buckets(&self) -> Vec<usize> {
        self.t.iter().map(|&t| day_bucket(t)).collect()
    }

    /// Sub-dataset of the given pixels, in the given order.
    pub fn subset(&self, pixels: &[usize]) -> Self {
        let mut ds = Dataset { offsets: vec![0], ..Default::default() };
        for &i in pixels {
            ds.pixels.push(self.pixels[i].clone());
            let r = self.observation_range(i);
            ds.t.extend_from_slice(&self.t[r.clone()]);
            ds.ndvi.extend_from_slice(&self.ndvi[r.clone()]);
            ds.dates.extend_from_slice(&self.dates[r]);
            ds.offsets.push(ds.t.len());
        }
        ds
    }

    /// Reconstructs observation records in dataset order.
    pub fn observations(&self) -> Vec<NdviObservation> {
        let mut out = Vec::with_capacity(self.n_observations());
        for (i, p) in self.pixels.iter().enumerate() {
            for k in self.observation_range(i) {
                out.push(NdviObservation {
                    pixel_id: p.pixel_id,
                    date: self.dates[k],
                    t: self.t[k],
                    ndvi: self.ndvi[k],
                    ndsi: None,
                    flags: Default::default(),
                });
            }
        }
        out
    }
}

/// Result of filtering observations and encoding pixels in one go.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    /// Filter rejections, indexed like [`crate::features::Rejection::ALL`].
    pub rejected: [usize; 6],
    pub pixel_issues: Vec<RecordIssue>,
    pub observation_issues: Vec<RecordIssue>,
    /// Retained observations whose pixel was not usable.
    pub orphans: usize,
}

/// Filters the raw acquisitions, encodes the pixels with `state` and groups
/// the retained observations under them.
pub fn prepare(state: &PreprocessorState, pixels: &[RawPixelRecord], observations: &[RawObservation]) -> Prepared {
    let filtered = filter_observations(observations);
    let (features, pixel_issues) = apply_preprocessor(state, pixels);
    let (dataset, orphans) = Dataset::assemble(features, &filtered.retained);
    Prepared { dataset, rejected: filtered.tally, pixel_issues, observation_issues: filtered.errors, orphans }
}
