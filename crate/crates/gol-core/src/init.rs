//! Classifier initialization that balances the first backward pass under
//! the Gumbel loss.
//!
//! With near-zero weights every class starts at score `q = b`. Summing the
//! Gumbel loss gradients of one positive and `C - 1` negative classes gives
//! `-exp(-b) + (C-1) exp(-b) / (exp(exp(-b)) - 1)`, which vanishes exactly
//! when `exp(exp(-b)) = C`, i.e. `b = -ln(ln C)`. Initializing the bias
//! there prevents the tail-suppressing gradient imbalance of the first
//! training steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias that zeroes the total Gumbel score gradient for `class_count`
/// classes at initialization: `-ln(ln C)`. Requires at least two classes so
/// the inner logarithm is positive.
pub fn solve_bias(class_count: usize) -> Result<f64> {
    if class_count < 2 {
        return Err(Error::DegenerateClassCount { count: class_count });
    }
    Ok(-(class_count as f64).ln().ln())
}

/// Total Gumbel score gradient of one positive and `C - 1` negative classes
/// when every score equals `bias`:
/// `-exp(-b) + (C-1) exp(-b) / (exp(exp(-b)) - 1)`.
///
/// Fails when `exp(exp(-bias))` overflows f64, which happens once the bias
/// drops below about -6.57.
pub fn initial_total_gradient(class_count: usize, bias: f64) -> Result<f64> {
    if class_count < 2 {
        return Err(Error::DegenerateClassCount { count: class_count });
    }
    let t = (-bias).exp();
    let denom = t.exp_m1();
    if !denom.is_finite() {
        return Err(Error::BiasOverflow { bias });
    }
    Ok(-t + (class_count as f64 - 1.0) * t / denom)
}

/// Classifier parameters in class-major layout: `weights[k*d..(k+1)*d]` is
/// class k's weight vector (column k of the conventional d-by-C matrix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub feature_dim: usize,
    pub class_count: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierParams {
    pub fn class_weights(&self, class: usize) -> &[f64] {
        &self.weights[class * self.feature_dim..(class + 1) * self.feature_dim]
    }
}

/// Gumbel-ready classifier: every weight 0.001 and every bias `-ln(ln C)`,
/// so initial scores sit at the gradient-balancing point regardless of the
/// (near-zero-mean) input features.
pub fn init_classifier(feature_dim: usize, class_count: usize) -> Result<ClassifierParams> {
    if feature_dim == 0 {
        return Err(Error::InvalidConfig { reason: "feature dim must be positive".into() });
    }
    let bias = solve_bias(class_count)?;
    Ok(ClassifierParams {
        feature_dim,
        class_count,
        weights: vec![0.001; feature_dim * class_count],
        bias: vec![bias; class_count],
    })
}
