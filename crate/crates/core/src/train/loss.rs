//! Pinball, periodicity and non-crossing loss terms with their gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::curve::{PhenologyParams, QuantileCurveSet, RawTransform, DAY_BUCKETS, N_PARAMS};
use crate::dataset::Dataset;
use crate::error::TrainError;
use crate::net::N_OUTPUTS;

/// Modelled quantile levels, in output-block order.
pub const QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];

/// Quantile index pairs `(i, j)` penalized when `f_i(t) > f_j(t)`.
pub const CROSSING_PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_per: f64,
    pub lambda_nc: f64,
    /// Number of uniformly spaced days on which crossing is evaluated.
    pub crossing_grid: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_per: 1.0, lambda_nc: 10.0, crossing_grid: 52 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda_per >= 0.0 && self.lambda_nc >= 0.0) {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        if self.crossing_grid == 0 {
            return Err(TrainError::Config("crossing grid needs at least one day".into()));
        }
        Ok(())
    }

    /// Evaluation days `k / n` for `k = 0..n`.
    pub fn grid(&self) -> Vec<f64> {
        crossing_grid(self.crossing_grid)
    }
}

pub fn crossing_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / n as f64).collect()
}

/// Asymmetric absolute loss of predicting quantile `q` with `f` when `y`
/// was observed.
#[inline]
pub fn pinball_term(y: f64, f: f64, q: f64) -> f64 {
    if y >= f {
        q * (y - f)
    } else {
        (1.0 - q) * (f - y)
    }
}

/// Derivative of [`pinball_term`] with respect to `f`. At `y == f` the
/// `y < f` branch is used.
#[inline]
pub fn pinball_slope(y: f64, f: f64, q: f64) -> f64 {
    if y > f {
        -q
    } else {
        1.0 - q
    }
}

/// Per-day-of-year sample weights proportional to the inverse observation
/// count, scaled so that non-empty buckets average to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayWeights {
    pub weights: Vec<f64>,
}

impl DayWeights {
    pub fn uniform() -> Self {
        Self { weights: vec![1.0; DAY_BUCKETS] }
    }

    pub fn from_buckets(buckets: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = vec![0usize; DAY_BUCKETS];
        for b in buckets {
            counts[b] += 1;
        }
        let filled: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
        // n / sum_k (c / c_k) is exact when all counts agree
        let weights = counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    0.0
                } else {
                    let c = c as f64;
                    filled.len() as f64 / filled.iter().map(|&ck| c / ck).sum::<f64>()
                }
            })
            .collect();
        Self { weights }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        Self::from_buckets(ds.buckets())
    }

    #[inline]
    pub fn weight(&self, bucket: usize) -> f64 {
        self.weights[bucket]
    }
}

/// Loss terms before weighting by the lambdas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Day-weighted mean pinball loss per quantile.
    pub pinball: [f64; 3],
    /// Mean over pixels of `sum_q (f_q(0) - f_q(1))^2`.
    pub periodicity: f64,
    /// Mean over pixels and grid days of the summed pairwise crossing.
    pub crossing: f64,
}

impl LossBreakdown {
    pub fn pinball_sum(&self) -> f64 {
        self.pinball.iter().sum()
    }

    pub fn total(&self, cfg: &LossConfig) -> f64 {
        self.pinball_sum() + cfg.lambda_per * self.periodicity + cfg.lambda_nc * self.crossing
    }

    pub fn add(&mut self, other: &Self) {
        for q in 0..3 {
            self.pinball[q] += other.pinball[q];
        }
        self.periodicity += other.periodicity;
        self.crossing += other.crossing;
    }

    pub fn is_finite(&self) -> bool {
        self.pinball.iter().all(|v| v.is_finite()) && self.periodicity.is_finite() && self.crossing.is_finite()
    }
}

/// Scale factors turning per-pixel sums into batch means; shared by every
/// block of one batch so block results add up to the batch loss.
#[derive(Debug, Clone, Copy)]
pub struct BatchScale {
    /// `1 / sum of day weights` over the batch observations (0 if none).
    pub pinball: f64,
    /// `1 / batch pixel count`.
    pub per_pixel: f64,
}

impl BatchScale {
    pub fn new(ds: &Dataset, obs_weights: &[f64], pixels: &[usize]) -> Self {
        let w: f64 = pixels.iter().map(|&i| obs_weights[ds.observation_range(i)].iter().sum::<f64>()).sum();
        Self { pinball: if w > 0.0 { 1.0 / w } else { 0.0 }, per_pixel: 1.0 / pixels.len() as f64 }
    }
}

/// How strongly each term enters the gradient.
#[derive(Debug, Clone, Copy)]
pub struct TermWeights {
    pub pinball: f64,
    pub periodicity: f64,
    pub crossing: f64,
}

impl TermWeights {
    pub fn from_config(cfg: &LossConfig) -> Self {
        Self { pinball: 1.0, periodicity: cfg.lambda_per, crossing: cfg.lambda_nc }
    }
}

/// Loss contributions of one pixel and, optionally, the gradient of
/// `w.pinball * pinball + w.periodicity * periodicity + w.crossing * crossing`
/// with respect to the three curves' parameters.
#[allow(clippy::too_many_arguments)]
fn pixel_terms(
    curves: &[PhenologyParams; 3],
    t: &[f64],
    y: &[f64],
    obs_w: &[f64],
    scale: BatchScale,
    grid: &[f64],
    weights: TermWeights,
    grad: Option<&mut [[f64; N_PARAMS]; 3]>,
) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    let mut local = [[0.0; N_PARAMS]; 3];
    let want = grad.is_some();

    for k in 0..t.len() {
        let w = obs_w[k] * scale.pinball;
        if w == 0.0 {
            continue;
        }
        for q in 0..3 {
            if want {
                let (f, g) = curves[q].value_and_grad(t[k]);
                out.pinball[q] += w * pinball_term(y[k], f, QUANTILES[q]);
                let s = weights.pinball * w * pinball_slope(y[k], f, QUANTILES[q]);
                for p in 0..N_PARAMS {
                    local[q][p] += s * g[p];
                }
            } else {
                let f = curves[q].value_unchecked(t[k]);
                out.pinball[q] += w * pinball_term(y[k], f, QUANTILES[q]);
            }
        }
    }

    for q in 0..3 {
        let (f0, g0) = curves[q].value_and_grad(0.0);
        let (f1, g1) = curves[q].value_and_grad(1.0);
        let d = f0 - f1;
        out.periodicity += scale.per_pixel * d * d;
        if want {
            let s = weights.periodicity * scale.per_pixel * 2.0 * d;
            for p in 0..N_PARAMS {
                local[q][p] += s * (g0[p] - g1[p]);
            }
        }
    }

    let grid_scale = scale.per_pixel / grid.len() as f64;
    for &tg in grid {
        let (vals, grads) = if want {
            let a = curves[0].value_and_grad(tg);
            let b = curves[1].value_and_grad(tg);
            let c = curves[2].value_and_grad(tg);
            ([a.0, b.0, c.0], Some([a.1, b.1, c.1]))
        } else {
            ([curves[0].value_unchecked(tg), curves[1].value_unchecked(tg), curves[2].value_unchecked(tg)], None)
        };
        for &(i, j) in &CROSSING_PAIRS {
            let gap = vals[i] - vals[j];
            if gap > 0.0 {
                out.crossing += grid_scale * gap;
                if let Some(g) = &grads {
                    let s = weights.crossing * grid_scale;
                    for p in 0..N_PARAMS {
                        local[i][p] += s * g[i][p];
                        local[j][p] -= s * g[j][p];
                    }
                }
            }
        }
    }

    if let Some(g) = grad {
        *g = local;
    }
    out
}

/// Loss of a batch of pixels given their raw network outputs
/// (`pixels.len() × 18`), plus the gradient with respect to those outputs.
pub fn raw_loss_and_grad(
    raw: &Array2<f64>,
    ds: &Dataset,
    pixels: &[usize],
    obs_weights: &[f64],
    scale: BatchScale,
    grid: &[f64],
    weights: TermWeights,
) -> (LossBreakdown, Array2<f64>) {
    let mut total = LossBreakdown::default();
    let mut d_raw = Array2::zeros((pixels.len(), N_OUTPUTS));
    for (row, &i) in pixels.iter().enumerate() {
        let r = raw.row(row);
        let r = r.as_slice().expect("contiguous rows");
        let tr: [RawTransform; 3] = std::array::from_fn(|q| RawTransform::new(&r[q * N_PARAMS..]));
        let curves = [tr[0].params, tr[1].params, tr[2].params];
        let range = ds.observation_range(i);
        let mut g = [[0.0; N_PARAMS]; 3];
        let terms = pixel_terms(
            &curves,
            &ds.t[range.clone()],
            &ds.ndvi[range.clone()],
            &obs_weights[range],
            scale,
            grid,
            weights,
            Some(&mut g),
        );
        total.add(&terms);
        for q in 0..3 {
            let pulled = tr[q].pullback(&g[q]);
            for p in 0..N_PARAMS {
                d_raw[[row, q * N_PARAMS + p]] = pulled[p];
            }
        }
    }
    (total, d_raw)
}

/// Per-observation day weights for a dataset.
pub fn observation_weights(ds: &Dataset, day_weights: &DayWeights) -> Vec<f64> {
    ds.t.iter().map(|&t| day_weights.weight(crate::curve::day_bucket(t))).collect()
}

/// Composite loss of fixed curve predictions over a batch: one curve set per
/// pixel of `ds`, with every pixel in the batch.
pub fn total_loss(
    predictions: &[QuantileCurveSet],
    ds: &Dataset,
    day_weights: &DayWeights,
    cfg: &LossConfig,
) -> Result<(f64, LossBreakdown), TrainError> {
    if ds.n_pixels() == 0 || ds.n_observations() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if predictions.len() < ds.n_pixels() {
        return Err(TrainError::MissingPrediction(predictions.len()));
    }
    let obs_w = observation_weights(ds, day_weights);
    let pixels: Vec<usize> = (0..ds.n_pixels()).collect();
    let scale = BatchScale::new(ds, &obs_w, &pixels);
    let grid = cfg.grid();
    let mut total = LossBreakdown::default();
    for i in pixels {
        let r = ds.observation_range(i);
        let terms = pixel_terms(
            &predictions[i].curves,
            &ds.t[r.clone()],
            &ds.ndvi[r.clone()],
            &obs_w[r],
            scale,
            &grid,
            TermWeights::from_config(cfg),
            None,
        );
        total.add(&terms);
    }
    Ok((total.total(cfg), total))
}
