//! Double-logistic seasonal greenness curve.
//!
//! A curve is a baseline level plus an amplitude times the difference of two
//! logistic transitions: green-up around `sos` and senescence around `sen`.
//! Transition durations enter through a softplus so that any real number is a
//! valid width.
//!
//! Network outputs are unconstrained; [`transform_raw`] squashes them into a
//! valid [`PhenologyParams`] so that `ndvi_min <= ndvi_max <= 1` always holds.

use serde::{Deserialize, Serialize};

use crate::error::CurveError;

/// Number of parameters describing one curve.
pub const N_PARAMS: usize = 6;

/// Lowest greenness level a transformed curve can reach.
pub const NDVI_FLOOR: f64 = -0.1;

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for strictly positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv requires y > 0");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Parameters of one double-logistic curve.
///
/// `matsos` and `eossen` are stored before the softplus, so the green-up
/// duration is `softplus(matsos)` and the senescence duration is
/// `softplus(eossen)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhenologyParams {
    pub ndvi_min: f64,
    pub ndvi_max: f64,
    pub sos: f64,
    pub matsos: f64,
    pub sen: f64,
    pub eossen: f64,
}

impl PhenologyParams {
    /// A flat curve at `level`.
    pub fn constant(level: f64) -> Self {
        Self { ndvi_min: level, ndvi_max: level, sos: 0.25, matsos: 0.0, sen: 0.75, eossen: 0.0 }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [self.ndvi_min, self.ndvi_max, self.sos, self.matsos, self.sen, self.eossen]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        Self { ndvi_min: a[0], ndvi_max: a[1], sos: a[2], matsos: a[3], sen: a[4], eossen: a[5] }
    }

    /// Green-up duration in normalized-year units.
    pub fn greenup_width(&self) -> f64 {
        softplus(self.matsos)
    }

    /// Senescence duration in normalized-year units.
    pub fn senescence_width(&self) -> f64 {
        softplus(self.eossen)
    }

    /// Checks the invariants every transformed parameter set satisfies.
    pub fn is_valid(&self) -> bool {
        let in_level = |v: f64| (NDVI_FLOOR..=1.0).contains(&v);
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.to_array().iter().all(|v| v.is_finite())
            && in_level(self.ndvi_min)
            && in_level(self.ndvi_max)
            && self.ndvi_min <= self.ndvi_max
            && in_unit(self.sos)
            && in_unit(self.sen)
    }

    /// Curve value at `t`.
    pub fn evaluate(&self, t: f64) -> Result<f64, CurveError> {
        check_day(t)?;
        Ok(self.value_unchecked(t))
    }

    /// Curve value without the domain check on `t`.
    #[inline]
    pub fn value_unchecked(&self, t: f64) -> f64 {
        let (s1, s2, _, _) = self.transitions(t);
        self.ndvi_min + (self.ndvi_max - self.ndvi_min) * (s1 - s2)
    }

    // Returns both sigmoid terms plus the two softplus widths. Widths that
    // underflow are clamped to the smallest normal float.
    #[inline]
    fn transitions(&self, t: f64) -> (f64, f64, f64, f64) {
        let gm = softplus(self.matsos).max(f64::MIN_POSITIVE);
        let ge = softplus(self.eossen).max(f64::MIN_POSITIVE);
        let s1 = sigmoid(-2.0 * (2.0 * self.sos + gm - 2.0 * t) / gm);
        let s2 = sigmoid(-2.0 * (2.0 * self.sen + ge - 2.0 * t) / ge);
        (s1, s2, gm, ge)
    }

    /// Curve value and its partial derivatives with respect to the six
    /// parameters, in [`PhenologyParams::to_array`] order.
    pub fn value_and_grad(&self, t: f64) -> (f64, [f64; N_PARAMS]) {
        let (s1, s2, gm, ge) = self.transitions(t);
        let amp = self.ndvi_max - self.ndvi_min;
        let bracket = s1 - s2;
        let d1 = s1 * (1.0 - s1);
        let d2 = s2 * (1.0 - s2);
        // arg1 = 4(t - sos)/gm - 2, arg2 = 4(t - sen)/ge - 2. A saturated
        // sigmoid has zero slope even when its width has underflowed.
        let (w1, w2) = (amp * d1, amp * d2);
        let grad = [
            1.0 - bracket,
            bracket,
            if w1 == 0.0 { 0.0 } else { -w1 * 4.0 / gm },
            if w1 == 0.0 { 0.0 } else { -w1 * 4.0 * (t - self.sos) / gm / gm * sigmoid(self.matsos) },
            if w2 == 0.0 { 0.0 } else { w2 * 4.0 / ge },
            if w2 == 0.0 { 0.0 } else { w2 * 4.0 * (t - self.sen) / ge / ge * sigmoid(self.eossen) },
        ];
        (self.ndvi_min + amp * bracket, grad)
    }

    /// Derivative of the curve with respect to `t`.
    pub fn slope(&self, t: f64) -> f64 {
        let (s1, s2, gm, ge) = self.transitions(t);
        let amp = self.ndvi_max - self.ndvi_min;
        let d1 = s1 * (1.0 - s1);
        let d2 = s2 * (1.0 - s2);
        let part = |d: f64, g: f64| if d == 0.0 { 0.0 } else { d * 4.0 / g };
        amp * (part(d1, gm) - part(d2, ge))
    }
}

fn check_day(t: f64) -> Result<(), CurveError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(CurveError::DayOutOfRange(t))
    }
}

/// Curves for the lower quartile, median and upper quartile of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurveSet {
    pub curves: [PhenologyParams; 3],
}

impl QuantileCurveSet {
    pub fn new(lower: PhenologyParams, median: PhenologyParams, upper: PhenologyParams) -> Self {
        Self { curves: [lower, median, upper] }
    }

    pub fn lower(&self) -> &PhenologyParams {
        &self.curves[0]
    }

    pub fn median(&self) -> &PhenologyParams {
        &self.curves[1]
    }

    pub fn upper(&self) -> &PhenologyParams {
        &self.curves[2]
    }

    /// The three quantile values at `t`, lower to upper.
    pub fn evaluate(&self, t: f64) -> Result<[f64; 3], CurveError> {
        check_day(t)?;
        Ok(self.values_unchecked(t))
    }

    #[inline]
    pub fn values_unchecked(&self, t: f64) -> [f64; 3] {
        [self.curves[0].value_unchecked(t), self.curves[1].value_unchecked(t), self.curves[2].value_unchecked(t)]
    }

    /// Builds a curve set from 18 raw network outputs laid out as three
    /// blocks of six, lower quartile first.
    pub fn from_raw(raw: &[f64]) -> Result<Self, CurveError> {
        if raw.len() != 3 * N_PARAMS {
            return Err(CurveError::RawLength(raw.len()));
        }
        let block = |q: usize| -> Result<PhenologyParams, CurveError> {
            let mut b = [0.0; N_PARAMS];
            b.copy_from_slice(&raw[q * N_PARAMS..(q + 1) * N_PARAMS]);
            transform_raw(b)
        };
        Ok(Self::new(block(0)?, block(1)?, block(2)?))
    }
}

/// Evaluates every curve set on every day of `t_grid`.
///
/// The result is indexed `[pixel][day][quantile]`.
pub fn evaluate_batch(sets: &[QuantileCurveSet], t_grid: &[f64]) -> Result<Vec<Vec<[f64; 3]>>, CurveError> {
    for &t in t_grid {
        check_day(t)?;
    }
    Ok(sets.iter().map(|set| t_grid.iter().map(|&t| set.values_unchecked(t)).collect()).collect())
}

/// Maps six unconstrained reals to valid curve parameters.
pub fn transform_raw(raw: [f64; N_PARAMS]) -> Result<PhenologyParams, CurveError> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(CurveError::NonFiniteRaw { index: i, value: raw[i] });
    }
    Ok(RawTransform::new(&raw).params)
}

/// [`transform_raw`] together with its Jacobian.
///
/// Raw inputs are ordered `(ndvi_min, ndvi_max, sos, sen, matsos, eossen)`,
/// which differs from the parameter order of [`PhenologyParams::to_array`].
/// Each raw input drives one parameter, except that `raw0` also moves
/// `ndvi_max`.
#[derive(Debug, Clone, Copy)]
pub struct RawTransform {
    pub params: PhenologyParams,
    /// Derivative of each raw input's own parameter, in raw order.
    pub diag: [f64; N_PARAMS],
    /// `d ndvi_max / d raw_0`.
    pub max_wrt_raw0: f64,
}

impl RawTransform {
    /// Transform of `raw[..6]`; callers guarantee finiteness.
    pub fn new(raw: &[f64]) -> Self {
        let s0 = sigmoid(raw[0]);
        let s1 = sigmoid(raw[1]);
        let s2 = sigmoid(raw[2]);
        let s3 = sigmoid(raw[3]);
        let ndvi_min = NDVI_FLOOR + (1.0 - NDVI_FLOOR) * s0;
        let ndvi_max = ndvi_min + (1.0 - ndvi_min) * s1;
        let dmin = (1.0 - NDVI_FLOOR) * s0 * (1.0 - s0);
        Self {
            params: PhenologyParams { ndvi_min, ndvi_max, sos: s2, matsos: raw[4], sen: s3, eossen: raw[5] },
            diag: [dmin, (1.0 - ndvi_min) * s1 * (1.0 - s1), s2 * (1.0 - s2), s3 * (1.0 - s3), 1.0, 1.0],
            max_wrt_raw0: (1.0 - s1) * dmin,
        }
    }

    /// Pulls a gradient in parameter order back to the raw inputs.
    #[inline]
    pub fn pullback(&self, grad: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
        [
            grad[0] * self.diag[0] + grad[1] * self.max_wrt_raw0,
            grad[1] * self.diag[1],
            grad[2] * self.diag[2],
            grad[4] * self.diag[3],
            grad[3],
            grad[5],
        ]
    }
}

/// Normalized day-of-year for a calendar date: `(ordinal - 1) / days_in_year`.
pub fn day_fraction(date: chrono::NaiveDate) -> f64 {
    use chrono::Datelike;
    let days = if date.leap_year() { 366.0 } else { 365.0 };
    f64::from(date.ordinal0()) / days
}

/// Number of day-of-year buckets (leap years included).
pub const DAY_BUCKETS: usize = 366;

/// Day-of-year bucket for a normalized day; inverse of [`day_fraction`] for
/// both leap and common years.
#[inline]
pub fn day_bucket(t: f64) -> usize {
    ((t * DAY_BUCKETS as f64 + 1e-9).floor() as usize).min(DAY_BUCKETS - 1)
}
