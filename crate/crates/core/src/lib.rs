//! Conditional quantile models of forest greenness over the year.
//!
//! Each pixel's NDVI distribution on a given day is summarized by three
//! double-logistic curves for the 0.25, 0.5 and 0.75 quantiles. A neural
//! network maps pixel covariates to those curves; observations far below
//! the lower quartile are flagged as browning anomalies.

pub mod anomaly;
pub mod baselines;
pub mod checkpoint;
pub mod curve;
pub mod dataset;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;

pub use curve::{PhenologyParams, QuantileCurveSet};
pub use dataset::Dataset;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/curve.md")]
    mod curve {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/anomalies.md")]
    mod anomalies {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
