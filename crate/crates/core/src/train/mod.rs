//! Training of the conditional quantile network.

pub mod loader;
pub mod loss;
pub mod optim;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::QuantileCurveSet;
use crate::dataset::Dataset;
use crate::error::{NetError, TrainError};
use crate::features::{PixelFeatures, PreprocessorState};
use crate::net::{Architecture, NetworkWeights, N_OUTPUTS};

pub use loader::{batches_per_epoch, chunked_batches};
pub use loss::{pinball_term, total_loss, DayWeights, LossBreakdown, LossConfig, CROSSING_PAIRS, QUANTILES};
pub use optim::{learning_rate, AdamW, AdamWConfig};

/// Pixels per parallel work unit. Fixed so that the gradient summation order,
/// and therefore the result, does not depend on the number of threads.
pub const BLOCK_PIXELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub learning_rate: f64,
    pub lr_final_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden: usize,
    pub n_layers: usize,
    pub skip_into: usize,
    pub species_dim: usize,
    pub habitat_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1024,
            chunk_size: 8192,
            learning_rate: 0.005,
            lr_final_factor: 0.01,
            weight_decay: 1e-4,
            seed: 0,
            hidden: 256,
            n_layers: 8,
            skip_into: 5,
            species_dim: 4,
            habitat_dim: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch_size and chunk_size must be positive");
        }
        if self.batch_size > self.chunk_size {
            return bad("batch_size must not exceed chunk_size");
        }
        if !(self.learning_rate > 0.0 && self.lr_final_factor > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning_rate and lr_final_factor must be positive, weight_decay non-negative");
        }
        Ok(())
    }

    pub fn architecture(&self, preprocessor: &PreprocessorState) -> Architecture {
        Architecture {
            n_continuous: preprocessor.feature_names.len(),
            n_species: preprocessor.n_species(),
            n_habitats: preprocessor.n_habitats(),
            species_dim: self.species_dim,
            habitat_dim: self.habitat_dim,
            hidden: self.hidden,
            n_layers: self.n_layers,
            skip_into: self.skip_into,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// Mean loss terms over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub pinball: [f64; 3],
    pub periodicity: f64,
    pub crossing: f64,
    pub total: f64,
    /// Learning rate of the last step in the epoch.
    pub learning_rate: f64,
}

/// A trained network together with everything needed to apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModel {
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    pub preprocessor: PreprocessorState,
    pub weights: NetworkWeights,
    pub training_log: Vec<EpochLog>,
}

impl ConditionalModel {
    /// Quantile curves for each pixel.
    pub fn predict(&self, pixels: &[PixelFeatures]) -> Result<Vec<QuantileCurveSet>, NetError> {
        let refs: Vec<&PixelFeatures> = pixels.iter().collect();
        let blocks: Vec<Result<Vec<QuantileCurveSet>, NetError>> = refs
            .par_chunks(BLOCK_PIXELS)
            .map(|block| {
                let raw = self.weights.predict_raw(block)?;
                block
                    .iter()
                    .zip(raw.rows())
                    .map(|(p, r)| {
                        QuantileCurveSet::from_raw(r.as_slice().expect("contiguous rows"))
                            .map_err(|_| NetError::NonFiniteOutput { pixel_id: p.pixel_id })
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(pixels.len());
        for b in blocks {
            out.extend(b?);
        }
        Ok(out)
    }
}

/// Everything the loop needs that stays fixed across batches.
struct Context<'a> {
    ds: &'a Dataset,
    obs_weights: Vec<f64>,
    grid: Vec<f64>,
    terms: loss::TermWeights,
}

/// Loss and weight gradient of one batch. Blocks are evaluated in parallel
/// and their results summed in block order.
fn batch_step(
    weights: &NetworkWeights,
    ctx: &Context<'_>,
    batch: &[usize],
) -> Result<(LossBreakdown, NetworkWeights), NetError> {
    let scale = loss::BatchScale::new(ctx.ds, &ctx.obs_weights, batch);
    let parts: Vec<Result<(LossBreakdown, NetworkWeights), NetError>> = batch
        .par_chunks(BLOCK_PIXELS)
        .map(|block| {
            let pixels: Vec<&PixelFeatures> = block.iter().map(|&i| &ctx.ds.pixels[i]).collect();
            let (raw, cache) = weights.forward(&pixels)?;
            let (terms, d_raw) =
                loss::raw_loss_and_grad(&raw, ctx.ds, block, &ctx.obs_weights, scale, &ctx.grid, ctx.terms);
            let grad = weights.backward(&cache, &d_raw)?;
            Ok((terms, grad))
        })
        .collect();
    let mut total = LossBreakdown::default();
    let mut grad: Option<NetworkWeights> = None;
    for p in parts {
        let (terms, g) = p?;
        total.add(&terms);
        match grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grad = Some(g),
        }
    }
    Ok((total, grad.unwrap_or_else(|| weights.zeros_like())))
}

fn run_epochs(
    model: &mut ConditionalModel,
    ds: &Dataset,
    first_epoch: usize,
    n_epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(), TrainError> {
    let cfg = model.train_config;
    let loss_cfg = model.loss_config;
    let ctx = Context {
        ds,
        obs_weights: loss::observation_weights(ds, &DayWeights::for_dataset(ds)),
        grid: loss_cfg.grid(),
        terms: loss::TermWeights::from_config(&loss_cfg),
    };
    let per_epoch = batches_per_epoch(ds.n_pixels(), cfg.batch_size, cfg.chunk_size);
    let total_steps = per_epoch * n_epochs;
    let mut opt = AdamW::for_weights(cfg.adamw(), &model.weights);

    for e in 0..n_epochs {
        let epoch = first_epoch + e;
        let batches = chunked_batches(ds.n_pixels(), cfg.batch_size, cfg.chunk_size, cfg.seed, epoch);
        let mut sum = LossBreakdown::default();
        let mut lr = cfg.learning_rate;
        for (b, batch) in batches.iter().enumerate() {
            let (terms, grad) = batch_step(&model.weights, &ctx, batch)?;
            if !terms.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: epoch + 1, batch: b });
            }
            lr = learning_rate(cfg.learning_rate, cfg.lr_final_factor, opt.step, total_steps);
            opt.step_weights(&mut model.weights, &grad, lr)?;
            sum.add(&terms);
        }
        let n = batches.len().max(1) as f64;
        let mean = LossBreakdown {
            pinball: sum.pinball.map(|v| v / n),
            periodicity: sum.periodicity / n,
            crossing: sum.crossing / n,
        };
        let log = EpochLog {
            epoch: epoch + 1,
            pinball: mean.pinball,
            periodicity: mean.periodicity,
            crossing: mean.crossing,
            total: mean.total(&loss_cfg),
            learning_rate: lr,
        };
        on_epoch(&log);
        model.training_log.push(log);
    }
    // the checkpoint stores 32-bit weights; round now so that a reloaded
    // model predicts exactly what this one does
    if n_epochs > 0 {
        model.weights.round_to_f32();
    }
    Ok(())
}

/// Trains a fresh network on `ds`.
pub fn fit(
    ds: &Dataset,
    preprocessor: &PreprocessorState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<ConditionalModel, TrainError> {
    fit_with_progress(ds, preprocessor, cfg, loss_cfg, &mut |_| {})
}

/// [`fit`], calling `on_epoch` after every epoch.
pub fn fit_with_progress(
    ds: &Dataset,
    preprocessor: &PreprocessorState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<ConditionalModel, TrainError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if ds.n_pixels() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let arch = cfg.architecture(preprocessor);
    let mut weights = NetworkWeights::init(arch, cfg.seed)?;
    weights.round_to_f32();
    let mut model = ConditionalModel {
        train_config: *cfg,
        loss_config: *loss_cfg,
        preprocessor: preprocessor.clone(),
        weights,
        training_log: Vec::new(),
    };
    run_epochs(&mut model, ds, 0, cfg.epochs, on_epoch)?;
    Ok(model)
}

/// Continues training a model for `extra_epochs` more epochs. The optimizer
/// state starts from zero and the learning-rate schedule spans only the new
/// epochs; the loader continues the epoch numbering.
pub fn resume(
    model: &ConditionalModel,
    ds: &Dataset,
    extra_epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<ConditionalModel, TrainError> {
    if ds.n_pixels() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut next = model.clone();
    let arch = next.weights.arch;
    if ds.pixels.iter().any(|p| p.continuous.len() != arch.n_continuous) {
        return Err(NetError::Dimension("features do not match the model".into()).into());
    }
    let first = next.training_log.last().map_or(0, |l| l.epoch);
    run_epochs(&mut next, ds, first, extra_epochs, on_epoch)?;
    Ok(next)
}

/// Raw-output gradient of the composite loss for a batch of pixels of `ds`,
/// used by tests and diagnostics.
pub fn loss_gradient(
    raw: &Array2<f64>,
    ds: &Dataset,
    pixels: &[usize],
    day_weights: &DayWeights,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array2<f64>), TrainError> {
    if pixels.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if raw.dim() != (pixels.len(), N_OUTPUTS) {
        return Err(TrainError::Net(NetError::Dimension(format!(
            "raw outputs are {:?}, expected ({}, {N_OUTPUTS})",
            raw.dim(),
            pixels.len()
        ))));
    }
    let w = loss::observation_weights(ds, day_weights);
    let scale = loss::BatchScale::new(ds, &w, pixels);
    Ok(loss::raw_loss_and_grad(raw, ds, pixels, &w, scale, &cfg.grid(), loss::TermWeights::from_config(cfg)))
}
