//! Deterministic minibatch SGD on synthetic long-tailed classification data.
//!
//! A fixed seed pins every random decision (parameter init, epoch shuffles,
//! oversampling draws), so a run is reproducible end to end: the same config
//! and data yield the same model and the same report, apart from wall time.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{ClipRange, ScoreVector, Temperature};
use crate::analysis::{weight_norm_report, WeightNormReport};
use crate::data::{
    expand_indices_with_rng, repeat_factors, stratified_split, ClassFrequencyTable,
    GroupThresholds, PerGroup, SplitIndices, SyntheticConfig, SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::init::init_classifier;
use crate::loss::{
    droploss_weights, eql_weights, gol_loss_with_weights, gumbel_loss_tempered,
    positive_gradient_stats, sigmoid_bce, softmax_ce, DropState, LossKind,
    PositiveGradientReport, TargetVector,
};

/// Stream separation constant for the second training stage, so stage two
/// never replays the draws of stage one while staying tied to the same seed.
const STAGE2_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Epoch-level sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Plain shuffle of the training indices.
    #[default]
    Random,
    /// Square-root repeat-factor oversampling before the shuffle.
    RepeatFactor,
}

/// Network shape: a bare linear classifier or one ReLU hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Linear,
    OneHidden,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_hidden_dim() -> usize {
    64
}
fn default_sigma() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.0011
}
fn default_repeat_threshold() -> f64 {
    0.001
}
fn default_stage2_lr() -> f64 {
    1e-3
}
fn default_stage2_loss() -> LossKind {
    LossKind::Gumbel
}

/// Second-stage settings for decoupled training: the classifier is
/// re-initialized and retrained while everything below it stays frozen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    #[serde(default = "default_stage2_lr")]
    pub lr: f64,
    #[serde(default = "default_stage2_loss")]
    pub loss: LossKind,
}

/// Full training configuration. Serializable so runs can be described by a
/// single JSON file; unknown fields are rejected to catch typos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Gumbel-kernel temperature; ignored by the sigmoid and softmax losses.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Rarity threshold for the drop-weighted losses.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Target frequency for repeat-factor oversampling.
    #[serde(default = "default_repeat_threshold")]
    pub repeat_threshold: f64,
    /// Score clipping window for Gumbel-kernel losses. Scores outside it are
    /// clamped in the forward pass and receive no gradient.
    #[serde(default)]
    pub clip: ClipRange,
    /// Image-count boundaries of the rare/common/frequent groups. Scale them
    /// with the dataset so each group stays populated.
    #[serde(default)]
    pub group_thresholds: GroupThresholds,
    #[serde(default)]
    pub stage2: Option<Stage2Config>,
    pub data: SyntheticConfig,
}

impl TrainConfig {
    /// Validates every numeric field once, before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::InvalidConfig { reason: reason.into() });
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad("learning rate must be positive and finite");
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative and finite");
        }
        if self.model == ModelKind::OneHidden && self.hidden_dim == 0 {
            return bad("hidden dim must be positive for the one-hidden model");
        }
        if self.group_thresholds.rare_max >= self.group_thresholds.common_max {
            return bad("rare threshold must stay below the common threshold");
        }
        Temperature::new(self.sigma)?;
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::InvalidLambda { value: self.lambda });
        }
        if !self.repeat_threshold.is_finite()
            || self.repeat_threshold <= 0.0
            || self.repeat_threshold > 1.0
        {
            return Err(Error::InvalidRepeatThreshold { value: self.repeat_threshold });
        }
        if let Some(stage2) = &self.stage2 {
            if !stage2.lr.is_finite() || stage2.lr <= 0.0 {
                return bad("stage-two learning rate must be positive and finite");
            }
        }
        Ok(())
    }
}

/// A trained network. Weight buffers are row-major: output unit k owns the
/// contiguous block `weights[k*in_dim..(k+1)*in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub class_count: usize,
    /// Zero for linear models.
    pub hidden_dim: usize,
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub class_bias: Vec<f64>,
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(k, &b)| {
            let row = &weights[k * x.len()..(k + 1) * x.len()];
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        })
        .collect()
}

/// Intermediate activations kept for the backward pass.
struct ForwardPass {
    /// Post-ReLU hidden activations; empty for linear models.
    hidden: Vec<f64>,
    scores: Vec<f64>,
}

impl Model {
    /// Input width of the classifier layer.
    pub fn classifier_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.feature_dim,
            ModelKind::OneHidden => self.hidden_dim,
        }
    }

    fn forward(&self, x: &[f64]) -> ForwardPass {
        match self.kind {
            ModelKind::Linear => {
                ForwardPass { hidden: Vec::new(), scores: affine(&self.class_weights, &self.class_bias, x) }
            }
            ModelKind::OneHidden => {
                let mut hidden = affine(&self.hidden_weights, &self.hidden_bias, x);
                for h in &mut hidden {
                    *h = h.max(0.0);
                }
                let scores = affine(&self.class_weights, &self.class_bias, &hidden);
                ForwardPass { hidden, scores }
            }
        }
    }

    /// Raw per-class scores for one feature vector.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).scores
    }

    /// Index of the highest raw score. Ties go to the lower class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let scores = self.scores(x);
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = k;
            }
        }
        best
    }
}

/// Gradient (or velocity) buffers shaped exactly like the model parameters.
#[derive(Debug, Clone)]
struct ParamBuffers {
    hidden_w: Vec<f64>,
    hidden_b: Vec<f64>,
    class_w: Vec<f64>,
    class_b: Vec<f64>,
}

impl ParamBuffers {
    fn zeros_like(model: &Model) -> Self {
        Self {
            hidden_w: vec![0.0; model.hidden_weights.len()],
            hidden_b: vec![0.0; model.hidden_bias.len()],
            class_w: vec![0.0; model.class_weights.len()],
            class_b: vec![0.0; model.class_bias.len()],
        }
    }

    fn scale(&mut self, factor: f64) {
        for buf in [&mut self.hidden_w, &mut self.hidden_b, &mut self.class_w, &mut self.class_b]
        {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Accuracy metrics on a held-out index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pooled over all evaluated samples.
    pub overall_accuracy: f64,
    /// `None` for classes with no evaluated sample.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Unweighted mean of the per-class accuracies inside each group.
    pub group_accuracy: PerGroup<Option<f64>>,
}

/// Everything a finished run reports. Two runs with the same config and data
/// agree on every field except `wall_time_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub loss: LossKind,
    pub epochs_run: usize,
    /// Mean per-sample loss of each epoch.
    pub per_epoch_loss: Vec<f64>,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub group_accuracy: PerGroup<Option<f64>>,
    pub weight_norms: WeightNormReport,
    pub positive_gradients: PositiveGradientReport,
    /// Human-readable statement of the gradient accounting convention.
    pub db_convention: String,
    pub wall_time_s: f64,
}

impl RunReport {
    /// Copy with the timing field zeroed, for determinism comparisons.
    pub fn without_wall_time(&self) -> RunReport {
        RunReport { wall_time_s: 0.0, ..self.clone() }
    }
}

/// A finished training run: the model plus its report and the split and
/// frequency table the run was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
    pub split: SplitIndices,
    pub freq: ClassFrequencyTable,
}

/// Per-batch loss context resolved once from the config.
struct LossCtx<'a> {
    kind: LossKind,
    sigma: Temperature,
    clip: ClipRange,
    lambda: f64,
    drop: DropState,
    freq: &'a ClassFrequencyTable,
}

/// Mean loss and mean gradients over one batch. Positive-class gradient
/// magnitudes are appended to `positive_grads[label]` for dB accounting.
fn batch_pass(
    model: &Model,
    data: &SyntheticDataset,
    batch: &[usize],
    ctx: &LossCtx<'_>,
    positive_grads: Option<&mut Vec<Vec<f64>>>,
) -> Result<(f64, ParamBuffers)> {
    let class_count = model.class_count;
    let mut grads = ParamBuffers::zeros_like(model);
    let mut loss_sum = 0.0;
    let mut pos = positive_grads;
    let mut drop_rng = ctx.drop.rng();

    for &index in batch {
        let x = data.sample(index);
        let label = data.labels[index];
        let pass = model.forward(x);
        let raw = pass.scores;
        let target = TargetVector::one_hot(label, class_count)?;

        let clipped;
        let breakdown = if ctx.kind.uses_gumbel_kernel() {
            clipped = ScoreVector::new(raw.iter().map(|&q| ctx.clip.clamp(q)).collect())?;
            match ctx.kind {
                LossKind::Gumbel => gumbel_loss_tempered(&clipped, &target, ctx.sigma)?,
                LossKind::Gol => {
                    let weights =
                        droploss_weights(&target, ctx.freq, true, &ctx.drop, &mut drop_rng)?;
                    gol_loss_with_weights(&clipped, &target, &weights, ctx.sigma)?
                }
                LossKind::EqlGumbel => {
                    let weights = eql_weights(&target, ctx.freq, true, ctx.lambda)?;
                    gol_loss_with_weights(&clipped, &target, &weights, ctx.sigma)?
                }
                _ => unreachable!("non-gumbel kinds handled below"),
            }
        } else {
            let scores = ScoreVector::new(raw.clone())?;
            match ctx.kind {
                LossKind::SigmoidBce => sigmoid_bce(&scores, &target)?,
                LossKind::SoftmaxCe => softmax_ce(&scores, &target)?,
                _ => unreachable!("gumbel kinds handled above"),
            }
        };
        loss_sum += breakdown.total;
        if let Some(acc) = pos.as_deref_mut() {
            acc[label].push(breakdown.grad[label].abs());
        }

        // Clamping blocks the gradient wherever the raw score left the window.
        let dq: Vec<f64> = if ctx.kind.uses_gumbel_kernel() {
            raw.iter()
                .zip(&breakdown.grad)
                .map(|(&q, &g)| if q >= ctx.clip.lo && q <= ctx.clip.hi { g } else { 0.0 })
                .collect()
        } else {
            breakdown.grad
        };

        let input: &[f64] = match model.kind {
            ModelKind::Linear => x,
            ModelKind::OneHidden => &pass.hidden,
        };
        for (k, &gq) in dq.iter().enumerate() {
            if gq == 0.0 {
                continue;
            }
            grads.class_b[k] += gq;
            let row = &mut grads.class_w[k * input.len()..(k + 1) * input.len()];
            for (slot, &inp) in row.iter_mut().zip(input) {
                *slot += gq * inp;
            }
        }
        if model.kind == ModelKind::OneHidden {
            for j in 0..model.hidden_dim {
                if pass.hidden[j] <= 0.0 {
                    continue;
                }
                let mut dh = 0.0;
                for (k, &gq) in dq.iter().enumerate() {
                    if gq != 0.0 {
                        dh += gq * model.class_weights[k * model.hidden_dim + j];
                    }
                }
                if dh == 0.0 {
                    continue;
                }
                grads.hidden_b[j] += dh;
                let row = &mut grads.hidden_w[j * model.feature_dim..(j + 1) * model.feature_dim];
                for (slot, &xi) in row.iter_mut().zip(x) {
                    *slot += dh * xi;
                }
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((loss_sum * scale, grads))
}

/// One SGD-with-momentum step on a single parameter buffer:
/// `v = momentum * v - lr * (g + weight_decay * p)` then `p += v`.
fn sgd_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v - lr * (g + weight_decay * *p);
        *p += *v;
    }
}

/// Uniform fan-in init, `U(-1/sqrt(in_dim), 1/sqrt(in_dim))`, for layers that
/// are not balance-initialized. Weights are drawn row by row, then biases.
fn fan_in_init<R: RngCore>(out_dim: usize, in_dim: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weights = (0..out_dim * in_dim).map(|_| rng.random_range(-bound..bound)).collect();
    let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
    (weights, bias)
}

/// Builds the initial model. Gumbel-kernel losses start from the balanced
/// classifier init; the other losses use fan-in uniform draws. The hidden
/// layer, when present, is always drawn from the fan-in rule.
fn init_model<R: RngCore>(
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    loss: LossKind,
    rng: &mut R,
) -> Result<Model> {
    let (hidden_dim, hidden_weights, hidden_bias) = match cfg.model {
        ModelKind::Linear => (0, Vec::new(), Vec::new()),
        ModelKind::OneHidden => {
            let (w, b) = fan_in_init(cfg.hidden_dim, data.feature_dim, rng);
            (cfg.hidden_dim, w, b)
        }
    };
    let input_dim = match cfg.model {
        ModelKind::Linear => data.feature_dim,
        ModelKind::OneHidden => cfg.hidden_dim,
    };
    let (class_weights, class_bias) = if loss.uses_gumbel_kernel() {
        let params = init_classifier(input_dim, data.class_count)?;
        (params.weights, params.bias)
    } else {
        fan_in_init(data.class_count, input_dim, rng)
    };
    Ok(Model {
        kind: cfg.model,
        feature_dim: data.feature_dim,
        class_count: data.class_count,
        hidden_dim,
        hidden_weights,
        hidden_bias,
        class_weights,
        class_bias,
    })
}

/// Epoch sample order for one epoch: oversample (optionally) then shuffle.
fn epoch_order<R: RngCore>(
    train: &[usize],
    factors: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = match factors {
        None => train.to_vec(),
        Some(factors) => {
            let expanded = expand_indices_with_rng(factors, rng)?;
            expanded.into_iter().map(|i| train[i]).collect()
        }
    };
    order.shuffle(rng);
    Ok(order)
}

/// Runs `epochs` of SGD over the training indices, mutating the model in
/// place. Returns the mean per-sample loss of each epoch.
#[allow(clippy::too_many_arguments)]
fn run_phase<R: RngCore>(
    model: &mut Model,
    data: &SyntheticDataset,
    train: &[usize],
    freq: &ClassFrequencyTable,
    cfg: &TrainConfig,
    loss: LossKind,
    epochs: usize,
    lr: f64,
    freeze_hidden: bool,
    rng: &mut R,
    positive_grads: &mut Vec<Vec<f64>>,
) -> Result<Vec<f64>> {
    let ctx = LossCtx {
        kind: loss,
        sigma: Temperature::new(cfg.sigma)?,
        clip: cfg.clip,
        lambda: cfg.lambda,
        drop: DropState::new(cfg.lambda, 0.5, 0.5, cfg.seed)?,
        freq,
    };
    let factors: Option<Vec<f64>> = match cfg.sampler {
        SamplerKind::Random => None,
        SamplerKind::RepeatFactor => {
            let per_class = repeat_factors(freq, cfg.repeat_threshold)?;
            Some(train.iter().map(|&i| per_class[data.labels[i]]).collect())
        }
    };
    let mut velocity = ParamBuffers::zeros_like(model);
    let mut per_epoch = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let order = epoch_order(train, factors.as_deref(), rng)?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFiniteScore { .. } => Error::Divergence { epoch, step },
                other => other,
            };
            let (mean_loss, grads) =
                batch_pass(model, data, batch, &ctx, Some(positive_grads)).map_err(diverged)?;
            if !mean_loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            epoch_loss += mean_loss * batch.len() as f64;
            seen += batch.len();
            if !freeze_hidden && model.kind == ModelKind::OneHidden {
                sgd_step(
                    &mut model.hidden_weights,
                    &mut velocity.hidden_w,
                    &grads.hidden_w,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                );
                sgd_step(
                    &mut model.hidden_bias,
                    &mut velocity.hidden_b,
                    &grads.hidden_b,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                );
            }
            sgd_step(
                &mut model.class_weights,
                &mut velocity.class_w,
                &grads.class_w,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            sgd_step(
                &mut model.class_bias,
                &mut velocity.class_b,
                &grads.class_b,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
        per_epoch.push(epoch_loss / seen.max(1) as f64);
    }
    Ok(per_epoch)
}

/// Accuracy of the model on the given sample indices.
pub fn evaluate(
    model: &Model,
    data: &SyntheticDataset,
    indices: &[usize],
    freq: &ClassFrequencyTable,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::EmptyInput);
    }
    if freq.len() != model.class_count {
        return Err(Error::LengthMismatch { left: freq.len(), right: model.class_count });
    }
    let mut correct = vec![0usize; model.class_count];
    let mut total = vec![0usize; model.class_count];
    for &i in indices {
        let label = data.labels[i];
        total[label] += 1;
        if model.predict(data.sample(i)) == label {
            correct[label] += 1;
        }
    }
    let per_class_accuracy: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { None } else { Some(c as f64 / t as f64) })
        .collect();

    let mut sums: PerGroup<f64> = PerGroup::default();
    let mut counts: PerGroup<usize> = PerGroup::default();
    for (class, acc) in per_class_accuracy.iter().enumerate() {
        if let Some(acc) = acc {
            let group = freq.group(class);
            *sums.get_mut(group) += acc;
            *counts.get_mut(group) += 1;
        }
    }
    let group_mean = |group| {
        let n: usize = *counts.get(group);
        if n == 0 {
            None
        } else {
            Some(sums.get(group) / n as f64)
        }
    };
    let group_accuracy = PerGroup {
        rare: group_mean(crate::data::FrequencyGroup::Rare),
        common: group_mean(crate::data::FrequencyGroup::Common),
        frequent: group_mean(crate::data::FrequencyGroup::Frequent),
    };
    let overall = correct.iter().sum::<usize>() as f64 / indices.len() as f64;
    Ok(EvalReport { overall_accuracy: overall, per_class_accuracy, group_accuracy })
}

const DB_CONVENTION: &str =
    "10*log10(mean |dL/dq| over positive-class occurrences across all training steps)";

fn finish_report(
    model: &Model,
    data: &SyntheticDataset,
    split: &SplitIndices,
    freq: &ClassFrequencyTable,
    loss: LossKind,
    per_epoch_loss: Vec<f64>,
    positive_grads: &[Vec<f64>],
    started: Instant,
) -> Result<RunReport> {
    let eval = evaluate(model, data, &split.test, freq)?;
    let weight_norms = weight_norm_report(&model.class_weights, model.class_count, freq)?;
    let positive_gradients = positive_gradient_stats(positive_grads, freq)?;
    Ok(RunReport {
        loss,
        epochs_run: per_epoch_loss.len(),
        per_epoch_loss,
        overall_accuracy: eval.overall_accuracy,
        per_class_accuracy: eval.per_class_accuracy,
        group_accuracy: eval.group_accuracy,
        weight_norms,
        positive_gradients,
        db_convention: DB_CONVENTION.into(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Trains a model from scratch on a stratified 80/20 split of `data`, using
/// the first-stage settings of `cfg`. The `stage2` field is ignored here;
/// see [`retrain_classifier`] for the second stage.
pub fn train(data: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let split = stratified_split(&data.labels, data.class_count)?;
    let train_labels: Vec<usize> = split.train.iter().map(|&i| data.labels[i]).collect();
    let freq =
        ClassFrequencyTable::from_labels(&train_labels, data.class_count, cfg.group_thresholds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(cfg, data, cfg.loss, &mut rng)?;
    let mut positive_grads = vec![Vec::new(); data.class_count];
    let per_epoch_loss = run_phase(
        &mut model,
        data,
        &split.train,
        &freq,
        cfg,
        cfg.loss,
        cfg.epochs,
        cfg.lr,
        false,
        &mut rng,
        &mut positive_grads,
    )?;
    let report = finish_report(
        &model,
        data,
        &split,
        &freq,
        cfg.loss,
        per_epoch_loss,
        &positive_grads,
        started,
    )?;
    Ok(TrainOutcome { model, report, split, freq })
}

/// Second stage of decoupled training: keeps every layer below the classifier
/// bit-for-bit frozen, re-initializes the classifier with the balanced init,
/// and retrains it with the stage-two loss and learning rate.
pub fn retrain_classifier(
    model: &Model,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
    stage2: &Stage2Config,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !stage2.lr.is_finite() || stage2.lr <= 0.0 {
        return Err(Error::InvalidConfig {
            reason: "stage-two learning rate must be positive and finite".into(),
        });
    }
    let started = Instant::now();
    let split = stratified_split(&data.labels, data.class_count)?;
    let train_labels: Vec<usize> = split.train.iter().map(|&i| data.labels[i]).collect();
    let freq =
        ClassFrequencyTable::from_labels(&train_labels, data.class_count, cfg.group_thresholds)?;

    let mut retrained = model.clone();
    let params = init_classifier(model.classifier_input_dim(), model.class_count)?;
    retrained.class_weights = params.weights;
    retrained.class_bias = params.bias;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STAGE2_SEED_SALT);
    let mut positive_grads = vec![Vec::new(); data.class_count];
    let per_epoch_loss = run_phase(
        &mut retrained,
        data,
        &split.train,
        &freq,
        cfg,
        stage2.loss,
        stage2.epochs,
        stage2.lr,
        true,
        &mut rng,
        &mut positive_grads,
    )?;
    let report = finish_report(
        &retrained,
        data,
        &split,
        &freq,
        stage2.loss,
        per_epoch_loss,
        &positive_grads,
        started,
    )?;
    Ok(TrainOutcome { model: retrained, report, split, freq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_longtail;

    fn small_data() -> SyntheticDataset {
        make_longtail(&SyntheticConfig {
            class_count: 8,
            imbalance_factor: 10.0,
            head_size: 40,
            feature_dim: 6,
            seed: 11,
        })
        .unwrap()
    }

    fn base_cfg(loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            epochs: 5,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 7,
            sampler: SamplerKind::Random,
            model: ModelKind::Linear,
            hidden_dim: 64,
            sigma: 1.0,
            lambda: 0.0011,
            repeat_threshold: 0.001,
            clip: ClipRange::default(),
            group_thresholds: GroupThresholds::default(),
            stage2: None,
            data: SyntheticConfig {
                class_count: 8,
                imbalance_factor: 10.0,
                head_size: 40,
                feature_dim: 6,
                seed: 11,
            },
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let data = small_data();
        for mutate in [
            (|c: &mut TrainConfig| c.epochs = 0) as fn(&mut TrainConfig),
            |c| c.batch_size = 0,
            |c| c.lr = 0.0,
            |c| c.lr = f64::NAN,
            |c| c.momentum = 1.0,
            |c| c.momentum = -0.1,
            |c| c.weight_decay = -1.0,
            |c| c.sigma = 0.0,
            |c| c.lambda = 0.0,
            |c| c.repeat_threshold = 0.0,
            |c| c.repeat_threshold = 1.5,
            |c| {
                c.model = ModelKind::OneHidden;
                c.hidden_dim = 0;
            },
            |c| c.group_thresholds = GroupThresholds { rare_max: 100, common_max: 10 },
            |c| c.stage2 = Some(Stage2Config { epochs: 1, lr: -1.0, loss: LossKind::Gumbel }),
        ] {
            let mut cfg = base_cfg(LossKind::Gumbel);
            mutate(&mut cfg);
            assert!(train(&data, &cfg).is_err(), "mutation should fail validation");
        }
    }

    #[test]
    fn config_json_round_trip_with_defaults() {
        let json = r#"{
            "loss": "gol",
            "epochs": 3,
            "batch_size": 8,
            "lr": 0.02,
            "seed": 5,
            "data": {
                "class_count": 8,
                "imbalance_factor": 10.0,
                "head_size": 40,
                "feature_dim": 6,
                "seed": 11
            }
        }"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.sampler, SamplerKind::Random);
        assert_eq!(cfg.model, ModelKind::Linear);
        assert_eq!(cfg.sigma, 1.0);
        assert_eq!(cfg.lambda, 0.0011);
        assert_eq!(cfg.clip, ClipRange::default());
        assert!(cfg.stage2.is_none());
        let back: TrainConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let json = r#"{
            "loss": "gumbel",
            "epochs": 3,
            "batch_size": 8,
            "lr": 0.02,
            "seed": 5,
            "learning_rate": 0.3,
            "data": {
                "class_count": 8,
                "imbalance_factor": 10.0,
                "head_size": 40,
                "feature_dim": 6,
                "seed": 11
            }
        }"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn training_is_deterministic_apart_from_wall_time() {
        let data = small_data();
        for loss in [LossKind::Gumbel, LossKind::SoftmaxCe, LossKind::Gol] {
            let cfg = base_cfg(loss);
            let a = train(&data, &cfg).unwrap();
            let b = train(&data, &cfg).unwrap();
            assert_eq!(a.model, b.model, "{loss}");
            assert_eq!(a.report.without_wall_time(), b.report.without_wall_time(), "{loss}");
            assert_eq!(
                serde_json::to_string(&a.report.without_wall_time()).unwrap(),
                serde_json::to_string(&b.report.without_wall_time()).unwrap(),
                "{loss}"
            );
        }
    }

    #[test]
    fn different_seeds_change_the_run() {
        let data = small_data();
        let mut cfg = base_cfg(LossKind::SoftmaxCe);
        let a = train(&data, &cfg).unwrap();
        cfg.seed = 8;
        let b = train(&data, &cfg).unwrap();
        assert_ne!(a.model, b.model);
    }

    #[test]
    fn loss_decreases_for_every_loss_kind() {
        let data = small_data();
        for loss in LossKind::ALL {
            let mut cfg = base_cfg(loss);
            cfg.epochs = 6;
            cfg.lr = 0.03;
            let outcome = train(&data, &cfg).unwrap();
            let first = outcome.report.per_epoch_loss[0];
            let last = *outcome.report.per_epoch_loss.last().unwrap();
            assert!(
                last < first,
                "{loss}: epoch losses did not decrease ({first} -> {last})"
            );
            assert!(outcome.report.per_epoch_loss.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn one_hidden_model_trains_and_improves() {
        let data = small_data();
        let mut cfg = base_cfg(LossKind::SoftmaxCe);
        cfg.model = ModelKind::OneHidden;
        cfg.hidden_dim = 16;
        cfg.epochs = 8;
        let outcome = train(&data, &cfg).unwrap();
        let report = &outcome.report;
        assert!(report.per_epoch_loss.last().unwrap() < &report.per_epoch_loss[0]);
        assert!(report.overall_accuracy > 0.3);
    }

    #[test]
    fn repeat_factor_sampler_runs_and_differs_from_random() {
        let data = small_data();
        let mut cfg = base_cfg(LossKind::Gumbel);
        cfg.sampler = SamplerKind::RepeatFactor;
        cfg.repeat_threshold = 0.1;
        let oversampled = train(&data, &cfg).unwrap();
        cfg.sampler = SamplerKind::Random;
        let plain = train(&data, &cfg).unwrap();
        assert_ne!(oversampled.model, plain.model);
    }

    #[test]
    fn evaluate_reports_per_class_and_group_accuracy() {
        let data = small_data();
        let cfg = base_cfg(LossKind::SoftmaxCe);
        let outcome = train(&data, &cfg).unwrap();
        let eval = evaluate(&outcome.model, &data, &outcome.split.test, &outcome.freq).unwrap();
        assert!((0.0..=1.0).contains(&eval.overall_accuracy));
        let covered = eval.per_class_accuracy.iter().flatten().count();
        assert_eq!(covered, data.class_count, "every class has a test sample");
        // Pooled accuracy equals the sample-weighted mean of per-class terms.
        let mut weighted = 0.0;
        let mut count = 0usize;
        for (class, acc) in eval.per_class_accuracy.iter().enumerate() {
            let n = outcome
                .split
                .test
                .iter()
                .filter(|&&i| data.labels[i] == class)
                .count();
            weighted += acc.unwrap() * n as f64;
            count += n;
        }
        assert!((eval.overall_accuracy - weighted / count as f64).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_through_the_whole_model() {
        let data = small_data();
        for (loss, model_kind) in [
            (LossKind::SigmoidBce, ModelKind::Linear),
            (LossKind::SoftmaxCe, ModelKind::OneHidden),
            (LossKind::Gumbel, ModelKind::OneHidden),
            (LossKind::EqlGumbel, ModelKind::Linear),
            (LossKind::Gol, ModelKind::OneHidden),
        ] {
            let mut cfg = base_cfg(loss);
            cfg.model = model_kind;
            cfg.hidden_dim = 5;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut model = init_model(&cfg, &data, loss, &mut rng).unwrap();
            // Move off the symmetric constant init so hidden gradients are
            // informative for the balance-initialized classifier too.
            for w in model.class_weights.iter_mut() {
                *w += rng.random_range(-0.05..0.05);
            }
            let split = stratified_split(&data.labels, data.class_count).unwrap();
            let labels: Vec<usize> = split.train.iter().map(|&i| data.labels[i]).collect();
            let freq = ClassFrequencyTable::from_labels(
                &labels,
                data.class_count,
                GroupThresholds::default(),
            )
            .unwrap();
            let ctx = LossCtx {
                kind: loss,
                sigma: Temperature::STANDARD,
                clip: ClipRange::default(),
                lambda: 0.0011,
                drop: DropState::new(0.0011, 0.5, 0.5, 0).unwrap(),
                freq: &freq,
            };
            let batch: Vec<usize> = split.train.iter().copied().take(12).collect();
            let (_, grads) = batch_pass(&model, &data, &batch, &ctx, None).unwrap();

            let h = 1e-5;
            let mut checked = 0;
            let param_count = model.class_weights.len();
            let hidden_count = model.hidden_weights.len();
            for pick in 0..10 {
                // Alternate between classifier and hidden parameters.
                let (analytic, slot_is_classifier, index) = if pick % 2 == 0 || hidden_count == 0
                {
                    let index = (pick * 37) % param_count;
                    (grads.class_w[index], true, index)
                } else {
                    let index = (pick * 53) % hidden_count;
                    (grads.hidden_w[index], false, index)
                };
                let probe = |delta: f64| -> f64 {
                    let mut m = model.clone();
                    if slot_is_classifier {
                        m.class_weights[index] += delta;
                    } else {
                        m.hidden_weights[index] += delta;
                    }
                    batch_pass(&m, &data, &batch, &ctx, None).unwrap().0
                };
                let numerical = (probe(h) - probe(-h)) / (2.0 * h);
                let denom = (numerical.abs() + analytic.abs()).max(1e-8);
                let rel = (numerical - analytic).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "{loss}: param {index} (classifier {slot_is_classifier}) rel {rel}"
                );
                checked += 1;
            }
            assert_eq!(checked, 10);
        }
    }

    #[test]
    fn divergent_learning_rate_reports_divergence() {
        let data = small_data();
        let mut cfg = base_cfg(LossKind::SoftmaxCe);
        cfg.lr = 1e12;
        cfg.weight_decay = 1e6;
        cfg.epochs = 30;
        match train(&data, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stage_two_freezes_hidden_layer_bitwise() {
        let data = small_data();
        let mut cfg = base_cfg(LossKind::SoftmaxCe);
        cfg.model = ModelKind::OneHidden;
        cfg.hidden_dim = 12;
        let stage1 = train(&data, &cfg).unwrap();
        let stage2 = Stage2Config { epochs: 4, lr: 1e-2, loss: LossKind::Gumbel };
        let outcome = retrain_classifier(&stage1.model, &data, &cfg, &stage2).unwrap();
        assert_eq!(outcome.model.hidden_weights, stage1.model.hidden_weights);
        assert_eq!(outcome.model.hidden_bias, stage1.model.hidden_bias);
        assert_ne!(outcome.model.class_weights, stage1.model.class_weights);
        assert_eq!(outcome.report.loss, LossKind::Gumbel);
    }

    #[test]
    fn stage_two_with_zero_epochs_equals_fresh_classifier_init() {
        let data = small_data();
        let mut cfg = base_cfg(LossKind::SoftmaxCe);
        cfg.model = ModelKind::OneHidden;
        cfg.hidden_dim = 12;
        let stage1 = train(&data, &cfg).unwrap();
        let stage2 = Stage2Config { epochs: 0, lr: 1e-2, loss: LossKind::Gumbel };
        let outcome = retrain_classifier(&stage1.model, &data, &cfg, &stage2).unwrap();
        let fresh = init_classifier(12, data.class_count).unwrap();
        assert_eq!(outcome.model.class_weights, fresh.weights);
        assert_eq!(outcome.model.class_bias, fresh.bias);
    }

    #[test]
    fn balanced_init_starts_gumbel_runs_at_equal_scores() {
        let data = small_data();
        let cfg = base_cfg(LossKind::Gumbel);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = init_model(&cfg, &data, LossKind::Gumbel, &mut rng).unwrap();
        let scores = model.scores(data.sample(0));
        let first = scores[0];
        assert!(scores.iter().all(|&s| (s - first).abs() < 1e-12));
    }
}
