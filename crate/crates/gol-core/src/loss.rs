//! Per-class losses and gradients for long-tail classification.
//!
//! Three base losses share one interface: binary cross-entropy through the
//! sigmoid, categorical cross-entropy through the softmax, and cross-entropy
//! through the Gumbel CDF. The Gumbel loss is the asymmetric one: a positive
//! sample at score `q` contributes loss `exp(-q)` whose gradient magnitude
//! grows exponentially as the score drops, while negative samples always
//! receive gradients inside `(0, 1)`. On top of these sit frequency-aware
//! per-class weights (deterministic EQL-style and stochastic drop weights)
//! and their composition with the Gumbel loss.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{sigmoid_scalar, ScoreVector, Temperature};
use crate::data::{ClassFrequencyTable, FrequencyGroup, PerGroup};
use crate::error::{Error, Result};

/// The loss families the trainer and the gradient checker can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SigmoidBce,
    SoftmaxCe,
    Gumbel,
    Gol,
    EqlGumbel,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::SigmoidBce,
        LossKind::SoftmaxCe,
        LossKind::Gumbel,
        LossKind::Gol,
        LossKind::EqlGumbel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::SigmoidBce => "sigmoid_bce",
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::Gumbel => "gumbel",
            LossKind::Gol => "gol",
            LossKind::EqlGumbel => "eql_gumbel",
        }
    }

    /// True for the losses computed through the Gumbel kernel, which are the
    /// ones trained with score clipping and balanced initialization.
    pub fn uses_gumbel_kernel(self) -> bool {
        matches!(self, LossKind::Gumbel | LossKind::Gol | LossKind::EqlGumbel)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid_bce" => Ok(LossKind::SigmoidBce),
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            "gumbel" => Ok(LossKind::Gumbel),
            "gol" => Ok(LossKind::Gol),
            "eql_gumbel" => Ok(LossKind::EqlGumbel),
            other => Err(Error::InvalidConfig { reason: format!("unknown loss `{other}`") }),
        }
    }
}

/// Per-class 0/1 targets. Multi-hot vectors are legal for the one-vs-all
/// losses; softmax cross-entropy additionally requires exactly one positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetVector(Vec<bool>);

impl TargetVector {
    pub fn new(values: Vec<bool>) -> Self {
        Self(values)
    }

    /// Validates that every entry is exactly 0.0 or 1.0.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        values
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::InvalidTarget { index, value: v })
                }
            })
            .collect::<Result<Vec<bool>>>()
            .map(Self)
    }

    /// One-hot vector with `class` set among `count` classes.
    pub fn one_hot(class: usize, count: usize) -> Result<Self> {
        if class >= count {
            return Err(Error::InvalidConfig {
                reason: format!("one-hot class {class} exceeds class count {count}"),
            });
        }
        let mut v = vec![false; count];
        v[class] = true;
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.0.iter().filter(|&&y| y).count()
    }
}

/// A loss evaluation: the scalar total, each class's additive contribution,
/// and the gradient of the total w.r.t. each score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_class: Vec<f64>,
    pub grad: Vec<f64>,
}

fn check_lengths(q: &ScoreVector, y: &TargetVector) -> Result<()> {
    if q.len() != y.len() {
        return Err(Error::LengthMismatch { left: q.len(), right: y.len() });
    }
    Ok(())
}

/// Loss and gradient of one positive class under the Gumbel kernel:
/// `-log cdf = exp(-q/sigma)`, exact in closed form.
#[inline]
fn gumbel_positive_terms(q: f64, inv_sigma: f64) -> (f64, f64) {
    let t = (-(q * inv_sigma)).exp();
    (t, -t * inv_sigma)
}

/// Loss and gradient of one negative class under the Gumbel kernel:
/// `-log(1 - cdf)` via `expm1`, gradient `t / (exp(t) - 1)` with
/// `t = exp(-q/sigma)`, always inside `(0, 1/sigma)`.
#[inline]
fn gumbel_negative_terms(q: f64, inv_sigma: f64) -> (f64, f64) {
    let t = (-(q * inv_sigma)).exp();
    let survival = -(-t).exp_m1();
    let loss = -survival.ln();
    let grad = inv_sigma * t / t.exp_m1();
    (loss, grad)
}

#[inline]
fn gumbel_terms(q: f64, positive: bool, inv_sigma: f64) -> (f64, f64) {
    if positive {
        gumbel_positive_terms(q, inv_sigma)
    } else {
        gumbel_negative_terms(q, inv_sigma)
    }
}

/// One-vs-all cross-entropy through the Gumbel CDF at temperature `sigma`.
pub fn gumbel_loss_tempered(
    q: &ScoreVector,
    y: &TargetVector,
    sigma: Temperature,
) -> Result<LossBreakdown> {
    check_lengths(q, y)?;
    let inv_sigma = 1.0 / sigma.get();
    let n = q.len();
    let mut per_class = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    let mut total = 0.0;
    for (&qi, &yi) in q.as_slice().iter().zip(y.as_slice()) {
        let (loss, g) = gumbel_terms(qi, yi, inv_sigma);
        per_class.push(loss);
        grad.push(g);
        total += loss;
    }
    Ok(LossBreakdown { total, per_class, grad })
}

/// One-vs-all Gumbel cross-entropy in its standard form (`sigma = 1`).
pub fn gumbel_loss(q: &ScoreVector, y: &TargetVector) -> Result<LossBreakdown> {
    gumbel_loss_tempered(q, y, Temperature::STANDARD)
}

/// `ln(1 + exp(x))` evaluated without overflow on either side.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One-vs-all binary cross-entropy through the sigmoid. Gradient per class
/// is `sigmoid(q) - y`.
pub fn sigmoid_bce(q: &ScoreVector, y: &TargetVector) -> Result<LossBreakdown> {
    check_lengths(q, y)?;
    let n = q.len();
    let mut per_class = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    let mut total = 0.0;
    for (&qi, &yi) in q.as_slice().iter().zip(y.as_slice()) {
        let p = sigmoid_scalar(qi);
        let (loss, g) = if yi { (softplus(-qi), p - 1.0) } else { (softplus(qi), p) };
        per_class.push(loss);
        grad.push(g);
        total += loss;
    }
    Ok(LossBreakdown { total, per_class, grad })
}

/// Categorical cross-entropy through the softmax. Requires exactly one
/// positive target; gradient is `softmax(q) - y`. The whole loss is
/// attributed to the positive class in `per_class`.
pub fn softmax_ce(q: &ScoreVector, y: &TargetVector) -> Result<LossBreakdown> {
    check_lengths(q, y)?;
    if q.is_empty() {
        return Err(Error::EmptyInput);
    }
    let positives = y.positive_count();
    if positives != 1 {
        return Err(Error::NotOneHot { count: positives });
    }
    let s = q.as_slice();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();

    let k = y.as_slice().iter().position(|&b| b).expect("one positive");
    let loss = log_sum - (s[k] - max);
    let mut per_class = vec![0.0; q.len()];
    per_class[k] = loss;
    let grad: Vec<f64> = exps
        .iter()
        .zip(y.as_slice())
        .map(|(&e, &yi)| e / sum - if yi { 1.0 } else { 0.0 })
        .collect();
    Ok(LossBreakdown { total: loss, per_class, grad })
}

/// Batch-level state for stochastic drop weighting: the rarity threshold,
/// the Bernoulli keep-rates for the two frequency regimes, and the seed that
/// makes weight draws reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropState {
    /// Image-frequency fraction below which a class counts as rare.
    pub lambda: f64,
    /// Keep probability for background negatives of rare/common classes,
    /// `(n_rare + n_common) / n_all` over the batch's foreground proposals.
    pub mu_rare_common: f64,
    /// Keep probability for background negatives of frequent classes,
    /// `n_frequent / n_all`.
    pub mu_frequent: f64,
    pub rng_seed: u64,
}

impl DropState {
    pub fn new(lambda: f64, mu_rare_common: f64, mu_frequent: f64, rng_seed: u64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::InvalidLambda { value: lambda });
        }
        for (name, value) in [("mu_rare_common", mu_rare_common), ("mu_frequent", mu_frequent)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidProbability { name, value });
            }
        }
        Ok(Self { lambda, mu_rare_common, mu_frequent, rng_seed })
    }

    /// Derives the keep-rates from foreground proposal counts per group.
    pub fn from_foreground_counts(
        lambda: f64,
        n_rare: usize,
        n_common: usize,
        n_frequent: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        let n_all = n_rare + n_common + n_frequent;
        if n_all == 0 {
            return Err(Error::EmptyInput);
        }
        Self::new(
            lambda,
            (n_rare + n_common) as f64 / n_all as f64,
            n_frequent as f64 / n_all as f64,
            rng_seed,
        )
    }

    /// Fresh RNG positioned at the start of this state's weight stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }
}

fn check_freq_lengths(y: &TargetVector, freq: &ClassFrequencyTable) -> Result<()> {
    if y.len() != freq.len() {
        return Err(Error::LengthMismatch { left: y.len(), right: freq.len() });
    }
    Ok(())
}

/// Drop weights per class. Foreground samples keep positives and drop rare
/// negatives deterministically (`w = 1 - T(f)(1 - y)`); background samples
/// draw Bernoulli keep-decisions with the state's per-regime rates. One
/// Bernoulli draw is consumed per class on the background path, so weights
/// depend only on inputs and the RNG stream position.
pub fn droploss_weights<R: RngCore>(
    y: &TargetVector,
    freq: &ClassFrequencyTable,
    is_foreground: bool,
    state: &DropState,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_freq_lengths(y, freq)?;
    if !state.lambda.is_finite() || state.lambda <= 0.0 {
        return Err(Error::InvalidLambda { value: state.lambda });
    }
    let n = y.len();
    let mut weights = Vec::with_capacity(n);
    for (class, &yi) in y.as_slice().iter().enumerate() {
        let rare = freq.below_threshold(class, state.lambda);
        let w = if is_foreground {
            if rare && !yi {
                0.0
            } else {
                1.0
            }
        } else {
            let mu = if rare { state.mu_rare_common } else { state.mu_frequent };
            if rng.random::<f64>() < mu {
                1.0
            } else {
                0.0
            }
        };
        weights.push(w);
    }
    Ok(weights)
}

/// Deterministic equalization weights `w = 1 - E(r) T(f)(1 - y)` with
/// `E(r) = 1` on foreground samples and 0 on background.
pub fn eql_weights(
    y: &TargetVector,
    freq: &ClassFrequencyTable,
    is_foreground: bool,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_freq_lengths(y, freq)?;
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::InvalidLambda { value: lambda });
    }
    let weights = y
        .as_slice()
        .iter()
        .enumerate()
        .map(|(class, &yi)| {
            if is_foreground && !yi && freq.below_threshold(class, lambda) {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Ok(weights)
}

/// Gumbel cross-entropy with externally supplied per-class weights.
/// Zero-weight classes are dropped outright: zero loss, zero gradient.
/// Weight 1 reproduces the unweighted per-class terms bit for bit.
pub fn gol_loss_with_weights(
    q: &ScoreVector,
    y: &TargetVector,
    weights: &[f64],
    sigma: Temperature,
) -> Result<LossBreakdown> {
    check_lengths(q, y)?;
    if weights.len() != q.len() {
        return Err(Error::LengthMismatch { left: weights.len(), right: q.len() });
    }
    let inv_sigma = 1.0 / sigma.get();
    let n = q.len();
    let mut per_class = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    let mut total = 0.0;
    for ((&qi, &yi), &w) in q.as_slice().iter().zip(y.as_slice()).zip(weights) {
        if w == 0.0 {
            per_class.push(0.0);
            grad.push(0.0);
            continue;
        }
        let (loss, g) = gumbel_terms(qi, yi, inv_sigma);
        if w == 1.0 {
            per_class.push(loss);
            grad.push(g);
            total += loss;
        } else {
            per_class.push(w * loss);
            grad.push(w * g);
            total += w * loss;
        }
    }
    Ok(LossBreakdown { total, per_class, grad })
}

/// Gumbel optimized loss: Gumbel cross-entropy under drop weights derived
/// from `state`. Each call draws its weights from a fresh RNG seeded with
/// `state.rng_seed`, so the result is a pure function of its arguments.
pub fn gol_loss(
    q: &ScoreVector,
    y: &TargetVector,
    freq: &ClassFrequencyTable,
    is_foreground: bool,
    state: &DropState,
) -> Result<LossBreakdown> {
    check_lengths(q, y)?;
    let mut rng = state.rng();
    let weights = droploss_weights(y, freq, is_foreground, state, &mut rng)?;
    gol_loss_with_weights(q, y, &weights, Temperature::STANDARD)
}

/// Mean absolute positive-score gradient of one class, in linear and dB
/// scale (`10 * log10(mean)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassGradientStat {
    pub mean_abs: f64,
    pub db: f64,
    pub sample_count: usize,
}

/// Positive-gradient accounting per class and per frequency group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveGradientReport {
    /// Index-aligned with the frequency table; `None` when the class never
    /// appeared as a positive.
    pub per_class: Vec<Option<ClassGradientStat>>,
    /// Mean of the per-class dB values inside each group; `None` for groups
    /// without any positive-carrying class.
    pub group_db: PerGroup<Option<f64>>,
}

/// Aggregates absolute gradients observed on positive samples. `grads[k]`
/// holds every recorded `dL/dq_k` where class k was the positive.
pub fn positive_gradient_stats(
    grads: &[Vec<f64>],
    freq: &ClassFrequencyTable,
) -> Result<PositiveGradientReport> {
    if grads.len() != freq.len() {
        return Err(Error::LengthMismatch { left: grads.len(), right: freq.len() });
    }
    let per_class: Vec<Option<ClassGradientStat>> = grads
        .iter()
        .map(|g| {
            if g.is_empty() {
                return None;
            }
            let mean_abs = g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
            Some(ClassGradientStat {
                mean_abs,
                db: 10.0 * mean_abs.log10(),
                sample_count: g.len(),
            })
        })
        .collect();

    let mut sums: PerGroup<f64> = PerGroup::default();
    let mut counts: PerGroup<usize> = PerGroup::default();
    for (class, stat) in per_class.iter().enumerate() {
        if let Some(stat) = stat {
            let group = freq.group(class);
            *sums.get_mut(group) += stat.db;
            *counts.get_mut(group) += 1;
        }
    }
    let summarize = |group: FrequencyGroup| {
        let n = *counts.get(group);
        if n == 0 {
            None
        } else {
            Some(sums.get(group) / n as f64)
        }
    };
    Ok(PositiveGradientReport {
        per_class,
        group_db: PerGroup {
            rare: summarize(FrequencyGroup::Rare),
            common: summarize(FrequencyGroup::Common),
            frequent: summarize(FrequencyGroup::Frequent),
        },
    })
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn score_target_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        proptest::collection::vec((-30.0f64..30.0, any::<bool>()), 1..24)
            .prop_map(|pairs| pairs.into_iter().unzip())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn losses_are_non_negative_and_finite((qs, ys) in score_target_pairs()) {
            let q = ScoreVector::new(qs).unwrap();
            let y = TargetVector::new(ys);
            for out in [gumbel_loss(&q, &y).unwrap(), sigmoid_bce(&q, &y).unwrap()] {
                prop_assert!(out.total.is_finite());
                prop_assert!(out.total >= 0.0);
                prop_assert!(out.per_class.iter().all(|&l| l >= 0.0 && l.is_finite()));
                prop_assert!(out.grad.iter().all(|&g| g.is_finite()));
                let sum: f64 = out.per_class.iter().sum();
                prop_assert!((sum - out.total).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_ce_total_matches_contributions(
            qs in proptest::collection::vec(-30.0f64..30.0, 2..24),
            k_raw in any::<usize>(),
        ) {
            let k = k_raw % qs.len();
            let q = ScoreVector::new(qs.clone()).unwrap();
            let y = TargetVector::one_hot(k, qs.len()).unwrap();
            let out = softmax_ce(&q, &y).unwrap();
            prop_assert!(out.total >= 0.0 && out.total.is_finite());
            let grad_sum: f64 = out.grad.iter().sum();
            // Softmax gradients sum to zero across classes.
            prop_assert!(grad_sum.abs() < 1e-9);
        }

        #[test]
        fn gumbel_negative_gradients_bounded_on_clip_range(
            qs in proptest::collection::vec(-4.0f64..=10.0, 1..24),
        ) {
            let q = ScoreVector::new(qs.clone()).unwrap();
            let y = TargetVector::new(vec![false; qs.len()]);
            let out = gumbel_loss(&q, &y).unwrap();
            prop_assert!(out.grad.iter().all(|&g| g > 0.0 && g < 1.0));
        }

        #[test]
        fn drop_weights_are_binary(
            seed in any::<u64>(),
            ys in proptest::collection::vec(any::<bool>(), 3..=3),
            foreground in any::<bool>(),
        ) {
            let freq = ClassFrequencyTable::new(
                &[(5, 5), (50, 50), (800, 800)],
                1000,
                crate::data::GroupThresholds::default(),
            ).unwrap();
            let st = DropState::new(0.2, 0.4, 0.9, seed).unwrap();
            let mut rng = st.rng();
            let y = TargetVector::new(ys);
            let w = droploss_weights(&y, &freq, foreground, &st, &mut rng).unwrap();
            prop_assert!(w.iter().all(|&x| x == 0.0 || x == 1.0));
            if foreground {
                for (k, &yk) in y.as_slice().iter().enumerate() {
                    if yk {
                        prop_assert_eq!(w[k], 1.0);
                    }
                }
            }
        }
    }
}
