//! Numerically stable activation kernels mapping raw classifier scores to
//! probabilities.
//!
//! Alongside the usual sigmoid and softmax, this module provides the Gumbel
//! CDF `exp(-exp(-q/sigma))` as an asymmetric activation. Its heavier lower
//! tail makes low scores much harder to saturate than under the sigmoid,
//! which is the property the rest of the crate builds on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive clipping bounds applied to scores before Gumbel activation.
///
/// The default range keeps `exp(exp(-q))` representable while capping the
/// probability mass lost at the upper cutoff at `1 - exp(-exp(-hi))`, which
/// is below 5e-5 for `hi = 10`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ClipRange {
    fn default() -> Self {
        Self { lo: -4.0, hi: 10.0 }
    }
}

impl ClipRange {
    /// Builds a validated range. Bounds must be finite with `lo < hi`.
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidClipRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// Clamps a single score into the range.
    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.lo, self.hi)
    }

    /// True when `q` lies strictly inside the range, where clipping is the
    /// identity and passes gradients through unchanged.
    pub fn is_interior(&self, q: f64) -> bool {
        q > self.lo && q < self.hi
    }
}

/// Positive temperature for the Gumbel kernel. `sigma = 1` is the standard
/// form; values below 1 sharpen the activation, values above 1 flatten it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    /// The standard Gumbel kernel, `sigma = 1`.
    pub const STANDARD: Temperature = Temperature(1.0);

    /// Builds a validated temperature. Must be finite and strictly positive.
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidTemperature { value: sigma });
        }
        Ok(Self(sigma))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::STANDARD
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Temperature::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Raw per-class classifier scores. Every entry is finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Wraps a score vector, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteScore { index });
            }
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Per-class probabilities, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Clamps every score into `range`, preserving order within the vector.
pub fn clip_scores(q: &ScoreVector, range: ClipRange) -> ScoreVector {
    ScoreVector(q.as_slice().iter().map(|&v| range.clamp(v)).collect())
}

/// Logistic function `1 / (1 + exp(-q))`, evaluated on the branch that never
/// exponentiates a positive argument.
pub fn sigmoid_scalar(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid over a score vector.
pub fn sigmoid(q: &ScoreVector) -> ProbVector {
    ProbVector(q.as_slice().iter().map(|&v| sigmoid_scalar(v)).collect())
}

/// Softmax with max-subtraction. The shifted exponentials always include one
/// exact `exp(0) = 1`, so the normalizer cannot vanish or overflow.
pub fn softmax(q: &ScoreVector) -> Result<ProbVector> {
    if q.is_empty() {
        return Err(Error::EmptyInput);
    }
    let s = q.as_slice();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector(exps.iter().map(|&e| e / sum).collect()))
}

/// Gumbel CDF `exp(-exp(-q/sigma))`.
pub fn gumbel_cdf(q: f64, sigma: Temperature) -> f64 {
    (-(-(q / sigma.get())).exp()).exp()
}

/// Log of the Gumbel CDF, computed analytically as `-exp(-q/sigma)`.
///
/// The naive `ln(exp(-exp(-q)))` underflows to `ln(0)` once `q/sigma` drops
/// below roughly -6.6; this form stays exact over the whole clip range.
pub fn gumbel_log_cdf(q: f64, sigma: Temperature) -> f64 {
    -(-(q / sigma.get())).exp()
}

/// Log of the Gumbel survival `ln(1 - exp(-exp(-q/sigma)))`, computed through
/// `expm1` so the survival probability never rounds to zero prematurely.
pub fn gumbel_log_survival(q: f64, sigma: Temperature) -> f64 {
    let t = (-(q / sigma.get())).exp();
    (-(-t).exp_m1()).ln()
}

/// Elementwise Gumbel CDF over a score vector.
pub fn gumbel(q: &ScoreVector, sigma: Temperature) -> ProbVector {
    ProbVector(q.as_slice().iter().map(|&v| gumbel_cdf(v, sigma)).collect())
}
