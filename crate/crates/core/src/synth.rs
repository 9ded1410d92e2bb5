//! Synthetic pixel corpora with known quantile curves.
//!
//! Every pixel gets covariates, a true [`QuantileCurveSet`] derived from
//! them through a seeded random map, and a series of acquisitions. A clear
//! acquisition on normalized day `t` is
//!
//! ```text
//! y = f50(t) + gap(t) * xi
//! ```
//!
//! where `xi` has median 0 and quartiles ±1, and `gap` is `f50 - f25` below
//! the median and `f75 - f50` above it. The true quartiles of `y` are then
//! exactly the three curves.
//!
//! Covariate distributions:
//!
//! | feature | distribution |
//! |---|---|
//! | forest_height | U(5, 45) m |
//! | forest_mix_rate | U(0, 1) |
//! | elevation | U(300, 2300) m |
//! | slope | U(0, 45) degrees |
//! | eastness, northness | sin / cos of an aspect U(0, 2π) |
//! | twi | N(8, 2.5) |
//! | tri | U(0, 20) |
//! | mean / profile / plan curvature | N(0, 0.02), N(0, 0.01), N(0, 0.01) |
//! | roughness | U(0, 30) |
//!
//! Species are drawn with elevation-dependent preferences; one to three
//! habitats share 60 to 100 sub-pixels.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::quartiles;
use crate::curve::{day_fraction, sigmoid, softplus_inv, PhenologyParams, QuantileCurveSet};
use crate::error::SynthError;
use crate::features::{MaskFlags, RawObservation, RawPixelRecord, N_CONTINUOUS};

/// Upper quartile of the standard logistic distribution.
const LOGISTIC_Q75: f64 = 1.098_612_288_668_109_8; // ln 3
/// Upper quartile of the standard normal distribution.
const NORMAL_Q75: f64 = 0.674_489_750_196_081_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Logistic,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    /// Full drop for the whole window.
    Step,
    /// Drop decays linearly to zero at the end of the window.
    Linear,
}

/// A disturbance applied to a random subset of pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub fraction: f64,
    pub start: NaiveDate,
    pub duration_days: u32,
    /// Drop in units of the local interquartile range.
    pub drop_iqr: f64,
    pub recovery: Recovery,
}

impl Injection {
    /// Multiplier of the drop on `date`, zero outside the window.
    pub fn factor(&self, date: NaiveDate) -> f64 {
        let d = (date - self.start).num_days();
        if d < 0 || d >= i64::from(self.duration_days) {
            return 0.0;
        }
        match self.recovery {
            Recovery::Step => 1.0,
            Recovery::Linear => 1.0 - d as f64 / f64::from(self.duration_days),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pixels: usize,
    pub start_year: i32,
    pub years: u32,
    pub cadence_days: u32,
    /// Probability that an acquisition is missing entirely.
    pub dropout: f64,
    /// Probability that an acquisition is cloud or shadow masked.
    pub cloud_fraction: f64,
    /// Emit snow-covered winter acquisitions at high elevation.
    pub snow: bool,
    /// Probability that forest height, mix rate or species is missing.
    pub missing_rate: f64,
    pub n_species: usize,
    pub n_habitats: usize,
    pub noise: NoiseFamily,
    /// Multiplier of the per-pixel quartile gaps; 0 gives noiseless data.
    pub spread_scale: f64,
    /// Ratio of the upper to the lower quartile gap.
    pub upper_spread_ratio: f64,
    /// Seed of the covariate-to-curve map.
    pub map_seed: u64,
    /// Seed of covariates, acquisitions and noise.
    pub seed: u64,
    pub injections: Vec<Injection>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pixels: 1000,
            start_year: 2018,
            years: 3,
            cadence_days: 5,
            dropout: 0.3,
            cloud_fraction: 0.1,
            snow: true,
            missing_rate: 0.02,
            n_species: 6,
            n_habitats: 10,
            noise: NoiseFamily::Logistic,
            spread_scale: 1.0,
            upper_spread_ratio: 1.0,
            map_seed: 1,
            seed: 0,
            injections: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.dropout) || !unit(self.cloud_fraction) || !unit(self.missing_rate) {
            return bad("dropout, cloud_fraction and missing_rate must lie in [0, 1]".into());
        }
        if self.cadence_days == 0 || self.years == 0 {
            return bad("cadence_days and years must be at least 1".into());
        }
        if self.n_species == 0 || self.n_habitats == 0 {
            return bad("need at least one species and one habitat".into());
        }
        if !(self.spread_scale >= 0.0 && self.upper_spread_ratio > 0.0) {
            return bad("spread_scale must be >= 0 and upper_spread_ratio > 0".into());
        }
        for (k, inj) in self.injections.iter().enumerate() {
            if !unit(inj.fraction) || inj.drop_iqr.is_nan() || inj.drop_iqr <= 0.0 || inj.duration_days == 0 {
                return bad(format!("injection {k}: need fraction in [0, 1], drop > 0, duration >= 1"));
            }
        }
        Ok(())
    }

    /// Acquisition dates shared by all pixels.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(self.start_year, 1, 1).expect("valid start year");
        let end = NaiveDate::from_ymd_opt(self.start_year + self.years as i32, 1, 1).expect("valid end year");
        let mut out = Vec::new();
        let mut d = start;
        while d < end {
            out.push(d);
            d += Duration::days(i64::from(self.cadence_days));
        }
        out
    }
}

/// Truth behind one emitted acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationTruth {
    /// True median on that day.
    pub clean: f64,
    /// Clean value plus noise.
    pub noisy: f64,
    /// Noisy value minus any injected drop; what a clear acquisition shows.
    pub observed: f64,
    pub injected: bool,
    /// The emitted value is masked or snow covered rather than `observed`.
    pub contaminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// True curves, aligned with the generated pixels.
    pub curves: Vec<QuantileCurveSet>,
    /// Aligned with the generated observations.
    pub observations: Vec<ObservationTruth>,
    /// Pixel ids affected by each injection.
    pub injected_pixels: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub pixels: Vec<RawPixelRecord>,
    pub observations: Vec<RawObservation>,
    pub truth: GroundTruth,
}

/// Draws `xi` with median 0 and quartiles ±1.
fn unit_quartile_noise(family: NoiseFamily, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        NoiseFamily::Logistic => {
            let u: f64 = Open01.sample(rng);
            (u / (1.0 - u)).ln() / LOGISTIC_Q75
        }
        NoiseFamily::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            z / NORMAL_Q75
        }
    }
}

/// Returns `(median, noisy value)` at `t`.
fn sample_value(curves: &QuantileCurveSet, family: NoiseFamily, t: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let [lo, mid, hi] = curves.values_unchecked(t);
    let xi = unit_quartile_noise(family, rng);
    let gap = if xi < 0.0 { mid - lo } else { hi - mid };
    (mid, mid + gap * xi)
}

/// Monte Carlo quartiles of the noise model of one pixel at `t`.
pub fn empirical_quantile_oracle(
    curves: &QuantileCurveSet,
    family: NoiseFamily,
    t: f64,
    n_draws: usize,
    seed: u64,
) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = (0..n_draws).map(|_| sample_value(curves, family, t, &mut rng).1).collect();
    quartiles(&mut draws).unwrap_or([f64::NAN; 3])
}

/// Centre and scale used to standardize each true covariate inside the map.
const FEATURE_SCALES: [(f64, f64); N_CONTINUOUS] = [
    (25.0, 11.5),
    (0.5, 0.29),
    (1300.0, 577.0),
    (22.5, 13.0),
    (0.0, 0.71),
    (0.0, 0.71),
    (8.0, 2.5),
    (10.0, 5.8),
    (0.0, 0.02),
    (0.0, 0.01),
    (0.0, 0.01),
    (15.0, 8.7),
];

/// Number of latent outputs: six curve shapes plus two spread levels.
const N_LATENT: usize = 8;
const ELEVATION: usize = 2;

/// Seeded random function from covariates to curve latents: linear terms,
/// a few pairwise products, and species and habitat offsets.
#[derive(Debug, Clone)]
struct GenerativeMap {
    linear: [[f64; N_CONTINUOUS]; N_LATENT],
    pairs: Vec<(usize, usize, [f64; N_LATENT])>,
    species: Vec<[f64; N_LATENT]>,
    habitats: Vec<[f64; N_LATENT]>,
}

impl GenerativeMap {
    fn new(seed: u64, n_species: usize, n_habitats: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |sd: f64| Normal::new(0.0, sd).expect("positive sd").sample(&mut rng);
        let mut linear = [[0.0; N_CONTINUOUS]; N_LATENT];
        for row in linear.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                // terrain curvatures carry little signal
                *v = normal(if (8..11).contains(&j) { 0.1 } else { 0.5 });
            }
        }
        // higher sites green up later, senesce earlier and peak lower
        linear[2][ELEVATION] += 1.2;
        linear[4][ELEVATION] -= 1.0;
        linear[1][ELEVATION] -= 0.8;
        let pairs = [(0, 1), (2, 6), (3, 5), (0, 2)]
            .into_iter()
            .map(|(a, b)| (a, b, std::array::from_fn(|_| normal(0.3))))
            .collect();
        let species = (0..n_species).map(|_| std::array::from_fn(|_| normal(0.6))).collect();
        let habitats = (0..n_habitats).map(|_| std::array::from_fn(|_| normal(0.4))).collect();
        Self { linear, pairs, species, habitats }
    }

    fn latents(&self, x: &[f64; N_CONTINUOUS], species: usize, habitats: &[(usize, f64)]) -> [f64; N_LATENT] {
        let z: [f64; N_CONTINUOUS] = std::array::from_fn(|j| (x[j] - FEATURE_SCALES[j].0) / FEATURE_SCALES[j].1);
        let mut u = self.species[species];
        for (k, uk) in u.iter_mut().enumerate() {
            *uk += self.linear[k].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            for (a, b, c) in &self.pairs {
                *uk += c[k] * z[*a] * z[*b];
            }
            for &(h, w) in habitats {
                *uk += w * self.habitats[h][k];
            }
        }
        u
    }
}

/// True curves from latents. Median levels, dates and widths stay inside
/// ranges where the curve returns close to its winter level by year end.
fn curves_from_latents(u: &[f64; N_LATENT], spread_scale: f64, upper_ratio: f64) -> QuantileCurveSet {
    let s: [f64; N_LATENT] = u.map(sigmoid);
    let median = PhenologyParams {
        ndvi_min: 0.15 + 0.30 * s[0],
        ndvi_max: 0.62 + 0.20 * s[1],
        sos: 0.20 + 0.14 * s[2],
        matsos: softplus_inv(0.04 + 0.08 * s[3]),
        sen: 0.66 + 0.12 * s[4],
        eossen: softplus_inv(0.04 + 0.06 * s[5]),
    };
    let winter_gap = spread_scale * (0.03 + 0.04 * s[6]);
    let summer_gap = spread_scale * (0.015 + 0.02 * s[7]);
    let shifted =
        |dw: f64, ds: f64| PhenologyParams { ndvi_min: median.ndvi_min + dw, ndvi_max: median.ndvi_max + ds, ..median };
    QuantileCurveSet::new(
        shifted(-winter_gap, -summer_gap),
        median,
        shifted(upper_ratio * winter_gap, upper_ratio * summer_gap),
    )
}

struct PixelDraw {
    record: RawPixelRecord,
    curves: QuantileCurveSet,
    observations: Vec<RawObservation>,
    truth: Vec<ObservationTruth>,
}

fn draw_covariates(rng: &mut ChaCha8Rng) -> [f64; N_CONTINUOUS] {
    let aspect = rng.random_range(0.0..std::f64::consts::TAU);
    let mut n = |sd: f64| -> f64 { Normal::new(0.0, sd).expect("positive sd").sample(rng) };
    let twi = 8.0 + n(2.5);
    let curv = [n(0.02), n(0.01), n(0.01)];
    [
        rng.random_range(5.0..45.0),
        rng.random_range(0.0..1.0),
        rng.random_range(300.0..2300.0),
        rng.random_range(0.0..45.0),
        aspect.sin(),
        aspect.cos(),
        twi,
        rng.random_range(0.0..20.0),
        curv[0],
        curv[1],
        curv[2],
        rng.random_range(0.0..30.0),
    ]
}

fn draw_species(rng: &mut ChaCha8Rng, elevation: f64, n_species: usize) -> usize {
    // species k prefers an elevation spread evenly over the sampled range
    let weights: Vec<f64> = (0..n_species)
        .map(|k| {
            let pref = 300.0 + 2000.0 * (k as f64 + 0.5) / n_species as f64;
            (-((elevation - pref) / 600.0).powi(2)).exp() + 0.05
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (k, w) in weights.iter().enumerate() {
        if r < *w {
            return k;
        }
        r -= w;
    }
    n_species - 1
}

fn draw_habitats(rng: &mut ChaCha8Rng, n_habitats: usize) -> Vec<(usize, u32)> {
    let k = rng.random_range(1..=3usize).min(n_habitats);
    let codes = sample(rng, n_habitats, k).into_vec();
    let total: u32 = rng.random_range(60..=100);
    let mut cuts: Vec<u32> = (0..k - 1).map(|_| rng.random_range(1..total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut prev = 0;
    for (i, &c) in codes.iter().enumerate() {
        let end = if i + 1 == k { total } else { cuts[i] };
        if end > prev {
            out.push((c, end - prev));
        }
        prev = end;
    }
    out.sort_unstable();
    out
}

fn species_code(k: usize) -> String {
    format!("sp{:02}", k + 1)
}

fn habitat_code(k: usize) -> String {
    format!("hab{:02}", k + 1)
}

fn draw_pixel(
    cfg: &SynthConfig,
    map: &GenerativeMap,
    dates: &[(NaiveDate, f64)],
    index: usize,
    injections: &[&Injection],
) -> PixelDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let x = draw_covariates(&mut rng);
    let species = draw_species(&mut rng, x[ELEVATION], cfg.n_species);
    let habitat_counts = draw_habitats(&mut rng, cfg.n_habitats);
    let total: u32 = habitat_counts.iter().map(|h| h.1).sum();
    let weights: Vec<(usize, f64)> =
        habitat_counts.iter().map(|&(h, c)| (h, f64::from(c) / f64::from(total))).collect();
    let curves = curves_from_latents(&map.latents(&x, species, &weights), cfg.spread_scale, cfg.upper_spread_ratio);

    let mut continuous: [Option<f64>; N_CONTINUOUS] = x.map(Some);
    for k in [0, 1] {
        if rng.random::<f64>() < cfg.missing_rate {
            continuous[k] = None;
        }
    }
    let species = (rng.random::<f64>() >= cfg.missing_rate).then(|| species_code(species));
    let width = (cfg.n_pixels as f64).sqrt().ceil().max(1.0) as usize;
    let record = RawPixelRecord {
        pixel_id: index as u64,
        continuous,
        species,
        habitat_counts: habitat_counts.iter().map(|&(h, c)| (habitat_code(h), c)).collect::<BTreeMap<_, _>>(),
        position: Some(((index / width) as i64, (index % width) as i64)),
    };

    let high = x[ELEVATION] > 1500.0;
    let mut observations = Vec::new();
    let mut truth = Vec::new();
    for &(date, t) in dates {
        if rng.random::<f64>() < cfg.dropout {
            continue;
        }
        let (clean, noisy) = sample_value(&curves, cfg.noise, t, &mut rng);
        let iqr = curves.upper().value_unchecked(t) - curves.lower().value_unchecked(t);
        let drop: f64 = injections.iter().map(|inj| inj.factor(date) * inj.drop_iqr).sum::<f64>() * iqr;
        let observed = noisy - drop;
        let injected = drop > 0.0;

        let cloudy = rng.random::<f64>() < cfg.cloud_fraction;
        let winter = matches!(date.month(), 12 | 1 | 2 | 3);
        let snowy = cfg.snow && high && winter && rng.random::<f64>() < 0.4;
        let (ndvi, ndsi, flags) = if cloudy {
            let bit = if rng.random::<bool>() { MaskFlags::CLOUD } else { MaskFlags::CLOUD_SHADOW };
            (rng.random_range(-0.1..0.4), rng.random_range(-0.3..0.3), MaskFlags(bit))
        } else if snowy {
            (rng.random_range(-0.1..0.2), rng.random_range(0.5..0.9), MaskFlags::default())
        } else {
            (observed, rng.random_range(-0.4..0.3), MaskFlags::default())
        };
        observations.push(RawObservation { pixel_id: index as u64, date, ndvi: Some(ndvi), ndsi: Some(ndsi), flags });
        truth.push(ObservationTruth { clean, noisy, observed, injected, contaminated: cloudy || snowy });
    }
    PixelDraw { record, curves, observations, truth }
}

/// Generates a corpus. Pixels use independent random streams, so the result
/// does not depend on the number of threads.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let map = GenerativeMap::new(cfg.map_seed, cfg.n_species, cfg.n_habitats);
    let dates: Vec<(NaiveDate, f64)> = cfg.dates().into_iter().map(|d| (d, day_fraction(d))).collect();

    let mut affected: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_pixels];
    let mut injected_pixels = Vec::with_capacity(cfg.injections.len());
    for (j, inj) in cfg.injections.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((1u64 << 40) + j as u64);
        let n = (inj.fraction * cfg.n_pixels as f64).round() as usize;
        let mut chosen = sample(&mut rng, cfg.n_pixels, n.min(cfg.n_pixels)).into_vec();
        chosen.sort_unstable();
        for &i in &chosen {
            affected[i].push(j);
        }
        injected_pixels.push(chosen.into_iter().map(|i| i as u64).collect());
    }

    let draws: Vec<PixelDraw> = (0..cfg.n_pixels)
        .into_par_iter()
        .map(|i| {
            let inj: Vec<&Injection> = affected[i].iter().map(|&j| &cfg.injections[j]).collect();
            draw_pixel(cfg, &map, &dates, i, &inj)
        })
        .collect();

    let mut corpus = SynthCorpus {
        pixels: Vec::with_capacity(cfg.n_pixels),
        observations: Vec::new(),
        truth: GroundTruth { curves: Vec::with_capacity(cfg.n_pixels), observations: Vec::new(), injected_pixels },
    };
    for d in draws {
        corpus.pixels.push(d.record);
        corpus.truth.curves.push(d.curves);
        corpus.observations.extend(d.observations);
        corpus.truth.observations.extend(d.truth);
    }
    Ok(corpus)
}
