//! Optimization loop: batching, gradient steps, logging, determinism.
//!
//! One tape per batch: parameters are bound once, every sample's forward
//! pass and loss share the binding, and a single backward sweep yields the
//! batch gradient. The shuffle stream is seeded, reductions are ordered,
//! so a fixed seed gives a bit-identical trajectory.

use std::env;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::VideoSample;
use crate::losses::{total_loss, LossError, LossOptions};
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::model::predictor::{
    build_forward, forward, ForwardError, ForwardOptions, Prediction, DEFAULT_THRESHOLD,
};
use crate::model::semantics::CaptionTable;
use crate::model::{ModelDims, ModelParameters};
use crate::numerics::gradcheck::{grad_check, GradCheckReport, FD_STEP};
use crate::{NumericsError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("inconsistent corpus: {message}")]
    Inconsistent { message: String },
    #[error("non-finite loss at step {step} (batch starting with video {batch_start_id})")]
    NonFiniteLoss { step: usize, batch_start_id: String },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Record a history line every this many steps.
    pub log_interval: usize,
    /// Evaluate on the eval set every this many steps (None = never).
    pub eval_interval: Option<usize>,
    pub include_label_loss: bool,
    pub softmax_scale: bool,
    /// Temporal-attention reduction ratio.
    pub reduction_ratio: usize,
    /// Binarization threshold for periodic evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            log_interval: 10,
            eval_interval: None,
            include_label_loss: true,
            softmax_scale: false,
            reduction_ratio: ModelDims::DEFAULT_REDUCTION_RATIO,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |field: &'static str, v: usize| -> Result<(), TrainError> {
            if v == 0 {
                return Err(TrainError::Config {
                    field,
                    message: "must be at least 1".into(),
                });
            }
            Ok(())
        };
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("log_interval", self.log_interval)?;
        positive("reduction_ratio", self.reduction_ratio)?;
        if let Some(iv) = self.eval_interval {
            positive("eval_interval", iv)?;
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config {
                field: "learning_rate",
                message: format!("{} must be > 0", self.learning_rate),
            });
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(TrainError::Config {
                field: "threshold",
                message: format!("{} is not in [0, 1]", self.threshold),
            });
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            softmax_scale: self.softmax_scale,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            include_label_loss: self.include_label_loss,
        }
    }
}

// ── Optimizers ──────────────────────────────────────────────────────────

enum OptimizerState {
    Sgd,
    Adam {
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        t: u64,
    },
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParameters) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: params
                    .set
                    .iter()
                    .map(|p| Tensor::zeros(p.value.shape()))
                    .collect(),
                v: params
                    .set
                    .iter()
                    .map(|p| Tensor::zeros(p.value.shape()))
                    .collect(),
                t: 0,
            },
        };
        Optimizer { kind, lr, state }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update from gradients aligned with registry order.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Tensor]) {
        match &mut self.state {
            OptimizerState::Sgd => {
                for (param, grad) in params.set.iter_mut().zip(grads) {
                    for (p, g) in param.value.data_mut().iter_mut().zip(grad.data()) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for ((param, grad), (mk, vk)) in
                    params.set.iter_mut().zip(grads).zip(m.iter_mut().zip(v))
                {
                    for (((p, &g), m1), v1) in param
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(mk.data_mut().iter_mut())
                        .zip(v1_iter(vk))
                    {
                        *m1 = ADAM_BETA1 * *m1 + (1.0 - ADAM_BETA1) * g;
                        *v1 = ADAM_BETA2 * *v1 + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m1 / bc1;
                        let v_hat = *v1 / bc2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn v1_iter(t: &mut Tensor) -> std::slice::IterMut<'_, f64> {
    t.data_mut().iter_mut()
}

// ── History ─────────────────────────────────────────────────────────────

/// Mean loss terms over one logging interval, plus weight-grid statistics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossSummary {
    pub l_video: f64,
    pub l_a_video: f64,
    pub l_v_video: f64,
    pub l_label: f64,
    pub l_avss_weighted: f64,
    pub total: f64,
    pub mu: f64,
    pub lambda_min: f64,
    pub lambda_mean: f64,
    pub lambda_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

#[derive(Default)]
struct IntervalAccumulator {
    n: usize,
    l_video: f64,
    l_a_video: f64,
    l_v_video: f64,
    l_label: f64,
    l_avss_weighted: f64,
    total: f64,
    lambda_min: f64,
    lambda_sum: f64,
    lambda_count: usize,
    lambda_max: f64,
}

impl IntervalAccumulator {
    fn reset(&mut self) {
        *self = IntervalAccumulator {
            lambda_min: f64::INFINITY,
            lambda_max: f64::NEG_INFINITY,
            ..Default::default()
        };
    }

    fn add(&mut self, stats: &BatchStats) {
        self.n += 1;
        self.l_video += stats.l_video;
        self.l_a_video += stats.l_a_video;
        self.l_v_video += stats.l_v_video;
        self.l_label += stats.l_label;
        self.l_avss_weighted += stats.l_avss_weighted;
        self.total += stats.total;
        self.lambda_min = self.lambda_min.min(stats.lambda_min);
        self.lambda_max = self.lambda_max.max(stats.lambda_max);
        self.lambda_sum += stats.lambda_sum;
        self.lambda_count += stats.lambda_count;
    }

    fn summary(&self, mu: f64) -> LossSummary {
        let inv = 1.0 / self.n.max(1) as f64;
        LossSummary {
            l_video: self.l_video * inv,
            l_a_video: self.l_a_video * inv,
            l_v_video: self.l_v_video * inv,
            l_label: self.l_label * inv,
            l_avss_weighted: self.l_avss_weighted * inv,
            total: self.total * inv,
            mu,
            lambda_min: self.lambda_min,
            lambda_mean: self.lambda_sum / self.lambda_count.max(1) as f64,
            lambda_max: self.lambda_max,
        }
    }
}

/// Mean loss terms of one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct BatchStats {
    pub l_video: f64,
    pub l_a_video: f64,
    pub l_v_video: f64,
    pub l_label: f64,
    pub l_avss_weighted: f64,
    pub total: f64,
    pub optimized: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_sum: f64,
    pub lambda_count: usize,
}

// ── Trainer ─────────────────────────────────────────────────────────────

pub struct Trainer<'a> {
    pub params: ModelParameters,
    table: &'a CaptionTable,
    cfg: TrainConfig,
    optimizer: Optimizer,
    shuffle_rng: StdRng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: ModelParameters,
        table: &'a CaptionTable,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
        // distinct stream from parameter init
        let shuffle_rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(0x5b75_1e0d));
        Ok(Trainer {
            params,
            table,
            cfg,
            optimizer,
            shuffle_rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Forward + loss for every sample in the batch on one tape, one
    /// backward sweep, one optimizer step. Returns the batch-mean terms.
    pub fn step_batch(&mut self, batch: &[&VideoSample]) -> Result<BatchStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mu = bound.var(self.params.ids.mu);

        let mut stats = BatchStats {
            l_video: 0.0,
            l_a_video: 0.0,
            l_v_video: 0.0,
            l_label: 0.0,
            l_avss_weighted: 0.0,
            total: 0.0,
            optimized: 0.0,
            lambda_min: f64::INFINITY,
            lambda_max: f64::NEG_INFINITY,
            lambda_sum: 0.0,
            lambda_count: 0,
        };
        let mut batch_optimized: Option<crate::Var> = None;
        for sample in batch {
            let fwd = build_forward(
                &mut tape,
                sample,
                self.table,
                &self.params,
                &bound,
                self.cfg.forward_options(),
            )?;
            let loss = total_loss(&mut tape, &fwd, sample, mu, self.cfg.loss_options())?;
            let breakdown = loss.breakdown(&tape);
            stats.l_video += breakdown.l_video;
            stats.l_a_video += breakdown.l_a_video;
            stats.l_v_video += breakdown.l_v_video;
            stats.l_label += breakdown.l_label;
            stats.l_avss_weighted += breakdown.l_avss_weighted;
            stats.total += breakdown.total;
            for &l in breakdown.lambda_grid.data() {
                stats.lambda_min = stats.lambda_min.min(l);
                stats.lambda_max = stats.lambda_max.max(l);
                stats.lambda_sum += l;
                stats.lambda_count += 1;
            }
            batch_optimized = Some(match batch_optimized {
                None => loss.optimized,
                Some(acc) => tape.add(acc, loss.optimized)?,
            });
        }
        let inv = 1.0 / batch.len() as f64;
        stats.l_video *= inv;
        stats.l_a_video *= inv;
        stats.l_v_video *= inv;
        stats.l_label *= inv;
        stats.l_avss_weighted *= inv;
        stats.total *= inv;

        let sum = batch_optimized.expect("batch is nonempty");
        let objective = tape.scale(sum, inv);
        stats.optimized = tape.value(objective).item();
        self.step += 1;
        if !stats.optimized.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                batch_start_id: batch[0].id.clone(),
            });
        }

        tape.backward(objective)?;
        let grads = bound.gradients(&tape, &self.params);
        self.optimizer.step(&mut self.params, &grads);
        Ok(stats)
    }

    pub fn evaluate(&self, samples: &[VideoSample]) -> Result<MetricsReport, TrainError> {
        evaluate_corpus(
            &self.params,
            self.table,
            samples,
            self.cfg.forward_options(),
            self.cfg.threshold,
        )
    }
}

/// Fresh weights for the given dimensions; see `ModelParameters::init`.
pub fn init_model(dims: ModelDims, seed: u64) -> ModelParameters {
    ModelParameters::init(dims, seed)
}

fn check_corpus(samples: &[VideoSample]) -> Result<(usize, usize, usize), TrainError> {
    let first = samples.first().ok_or(TrainError::EmptyDataset)?;
    let dims = (first.t(), first.d(), first.num_classes());
    for s in samples {
        if (s.t(), s.d(), s.num_classes()) != dims {
            return Err(TrainError::Inconsistent {
                message: format!("video {} does not share the corpus dimensions", s.id),
            });
        }
    }
    Ok(dims)
}

/// Full training run per the config; returns the final parameters and the
/// logged history.
pub fn train(
    train_set: &[VideoSample],
    eval_set: &[VideoSample],
    table: &CaptionTable,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, Vec<HistoryRecord>), TrainError> {
    cfg.validate()?;
    let (t, d, c) = check_corpus(train_set)?;
    if !eval_set.is_empty() {
        let (et, ed, ec) = check_corpus(eval_set)?;
        if (et, ed, ec) != (t, d, c) {
            return Err(TrainError::Inconsistent {
                message: "eval set dimensions differ from train set".into(),
            });
        }
    }
    let dims = ModelDims::new(t, d, c, table.d_text, cfg.reduction_ratio);
    let params = init_model(dims, cfg.seed);
    let mut trainer = Trainer::new(params, table, cfg.clone())?;

    let mut history = Vec::new();
    let mut interval = IntervalAccumulator::default();
    interval.reset();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut trainer.shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let stats = trainer.step_batch(&batch)?;
            interval.add(&stats);

            let step = trainer.step;
            let log_due = step % cfg.log_interval == 0;
            let eval_due = cfg
                .eval_interval
                .map(|iv| step % iv == 0 && !eval_set.is_empty())
                .unwrap_or(false);
            if log_due || eval_due {
                let mu = trainer.params.set.value(trainer.params.ids.mu).item();
                let metrics = if eval_due {
                    Some(trainer.evaluate(eval_set)?)
                } else {
                    None
                };
                history.push(HistoryRecord {
                    step,
                    epoch,
                    losses: interval.summary(mu),
                    metrics,
                });
                interval.reset();
            }
        }
    }
    Ok((trainer.params, history))
}

// ── Inference over a corpus (optionally threaded) ───────────────────────

/// Worker cap from the LINK_THREADS environment variable; defaults to 1
/// so runs are serial and deterministic unless explicitly widened.
pub fn thread_cap() -> usize {
    env::var("LINK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Forward passes for a whole corpus, in corpus order. With LINK_THREADS > 1
/// the work is chunked across scoped threads; results are collected in
/// order, so the output is identical either way.
pub fn predict_corpus(
    params: &ModelParameters,
    table: &CaptionTable,
    samples: &[VideoSample],
    options: ForwardOptions,
) -> Result<Vec<Prediction>, TrainError> {
    let workers = thread_cap().min(samples.len().max(1));
    if workers <= 1 {
        return samples
            .iter()
            .map(|s| forward(s, table, params, options).map_err(TrainError::from))
            .collect();
    }
    let chunk_size = samples.len().div_ceil(workers);
    let results: Vec<Result<Vec<Prediction>, ForwardError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|s| forward(s, table, params, options))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for chunk in results {
        out.extend(chunk?);
    }
    Ok(out)
}

pub fn evaluate_corpus(
    params: &ModelParameters,
    table: &CaptionTable,
    samples: &[VideoSample],
    options: ForwardOptions,
    threshold: f64,
) -> Result<MetricsReport, TrainError> {
    let preds = predict_corpus(params, table, samples, options)?;
    Ok(evaluate(preds.iter().zip(samples), threshold)?)
}

// ── Whole-model gradient check ──────────────────────────────────────────

/// Finite-difference check of the full forward + loss on one sample,
/// covering every registered parameter.
///
/// The similarity-weight grid `lambda` consumes a gradient-stopped copy of
/// the cosine grid, so the implemented gradient is the derivative of the
/// objective with those sample weights held at their base-point branches.
/// The differenced function pins them there (`mask_source`); everything
/// else, including `mu`'s live path through `lambda`, varies freely.
pub fn full_model_grad_check(
    sample: &VideoSample,
    params: &ModelParameters,
    table: &CaptionTable,
    cfg: &TrainConfig,
) -> Result<GradCheckReport, TrainError> {
    full_model_grad_check_with(sample, params, table, cfg, false)
}

/// Test hook behind [`full_model_grad_check`]: with `corrupt_analytic` the
/// analytic gradient of one head weight is deliberately biased before the
/// comparison, so the check must fail (negative control).
pub fn full_model_grad_check_with(
    sample: &VideoSample,
    params: &ModelParameters,
    table: &CaptionTable,
    cfg: &TrainConfig,
    corrupt_analytic: bool,
) -> Result<GradCheckReport, TrainError> {
    // analytic gradients from one tape pass
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mu = bound.var(params.ids.mu);
    let fwd = build_forward(&mut tape, sample, table, params, &bound, cfg.forward_options())?;
    let loss = total_loss(&mut tape, &fwd, sample, mu, cfg.loss_options())?;
    tape.backward(loss.optimized)?;
    let mut analytic = bound.gradients(&tape, params);
    if corrupt_analytic {
        let idx = params
            .set
            .iter()
            .position(|p| p.name == "head.audio.w")
            .expect("head weight is registered");
        analytic[idx].data_mut()[0] += 1.0;
    }
    let base_s = tape.value(loss.avss.s).clone();

    let names: Vec<String> = params.set.iter().map(|p| p.name.clone()).collect();
    let values: Vec<Tensor> = params.set.iter().map(|p| p.value.clone()).collect();
    let mut scratch = params.clone();
    let report = grad_check(
        move |perturbed: &[Tensor]| {
            for (slot, value) in scratch.set.iter_mut().zip(perturbed) {
                slot.value = value.clone();
            }
            let mut tape = Tape::new();
            let bound = scratch.bind(&mut tape);
            let mu = bound.var(scratch.ids.mu);
            let fwd = build_forward(
                &mut tape,
                sample,
                table,
                &scratch,
                &bound,
                cfg.forward_options(),
            )
            .map_err(|_| NumericsError::NonFinite {
                context: "perturbed forward pass".into(),
            })?;
            let loss = crate::losses::total_loss_with_mask_source(
                &mut tape,
                &fwd,
                sample,
                mu,
                cfg.loss_options(),
                Some(&base_s),
            )
            .map_err(|_| NumericsError::NonFinite {
                context: "perturbed loss".into(),
            })?;
            Ok(tape.value(loss.optimized).item())
        },
        &names,
        &values,
        &analytic,
        FD_STEP,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};
    use crate::model::semantics::build_fixture_table;

    fn tiny_setup(n: usize) -> (Vec<VideoSample>, CaptionTable) {
        let cfg = GenConfig {
            num_videos: n,
            t: 4,
            d: 6,
            c: 3,
            events_per_video: (1, 2),
            alignment_rate: 0.7,
            pseudo_corruption_rate: 0.0,
            feature_noise_sigma: 0.05,
            seed: 91,
        };
        let samples = generate(&cfg).unwrap();
        let names = crate::dataset::default_class_names(3);
        let table = build_fixture_table(&names, 6, 91).unwrap();
        (samples, table)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            log_interval: 1,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (samples, table) = tiny_setup(2);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let params = init_model(dims, 1);
        let reference = params.clone();
        let mut optimizer = Optimizer::new(OptimizerKind::Adam, 0.0, &params);
        let mut trainer = Trainer::new(params, &table, quick_cfg()).unwrap();
        // drive real gradients through, then apply the zero-lr update
        for _ in 0..3 {
            let batch: Vec<&VideoSample> = samples.iter().collect();
            let mut tape = Tape::new();
            let bound = trainer.params.bind(&mut tape);
            let mu = bound.var(trainer.params.ids.mu);
            let fwd = build_forward(
                &mut tape,
                batch[0],
                &table,
                &trainer.params,
                &bound,
                ForwardOptions::default(),
            )
            .unwrap();
            let loss = total_loss(&mut tape, &fwd, batch[0], mu, LossOptions::default()).unwrap();
            tape.backward(loss.optimized).unwrap();
            let grads = bound.gradients(&tape, &trainer.params);
            optimizer.step(&mut trainer.params, &grads);
        }
        for (a, b) in trainer.params.set.iter().zip(reference.set.iter()) {
            assert_eq!(a.value, b.value, "{} moved under lr = 0", a.name);
        }
    }

    #[test]
    fn sgd_descends_on_a_single_sample() {
        let (samples, table) = tiny_setup(1);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            ..quick_cfg()
        };
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let mut trainer = Trainer::new(init_model(dims, 2), &table, cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let stats = trainer.step_batch(&[&samples[0]]).unwrap();
            losses.push(stats.optimized);
        }
        for pair in losses.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (samples, table) = tiny_setup(6);
        let (eval, train_half) = (&samples[..2], &samples[2..]);
        let cfg = TrainConfig {
            eval_interval: Some(2),
            ..quick_cfg()
        };
        let run = || train(train_half, eval, &table, &cfg).unwrap();
        let (pa, ha) = run();
        let (pb, hb) = run();
        for (a, b) in pa.set.iter().zip(pb.set.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(ha.len(), hb.len());
        let last_a = ha.iter().rev().find_map(|r| r.metrics.as_ref()).unwrap();
        let last_b = hb.iter().rev().find_map(|r| r.metrics.as_ref()).unwrap();
        assert_eq!(last_a, last_b);
    }

    #[test]
    fn parameters_with_gradient_move_after_one_step() {
        let (samples, table) = tiny_setup(2);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let params = init_model(dims, 3);
        let before = params.clone();
        let mut trainer = Trainer::new(params, &table, quick_cfg()).unwrap();

        // find which parameters carry gradient
        let mut tape = Tape::new();
        let bound = trainer.params.bind(&mut tape);
        let mu = bound.var(trainer.params.ids.mu);
        let fwd = build_forward(
            &mut tape,
            &samples[0],
            &table,
            &trainer.params,
            &bound,
            ForwardOptions::default(),
        )
        .unwrap();
        let loss = total_loss(&mut tape, &fwd, &samples[0], mu, LossOptions::default()).unwrap();
        tape.backward(loss.optimized).unwrap();
        let grads = bound.gradients(&tape, &trainer.params);

        let batch = [&samples[0]];
        trainer.step_batch(&batch).unwrap();
        for ((after, before), grad) in trainer
            .params
            .set
            .iter()
            .zip(before.set.iter())
            .zip(&grads)
        {
            let has_grad = grad.data().iter().any(|&g| g != 0.0);
            let moved = after.value != before.value;
            if has_grad {
                assert!(moved, "{} had gradient but did not move", after.name);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_id() {
        let (samples, table) = tiny_setup(1);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let mut params = init_model(dims, 4);
        // poison one weight so the forward pass produces NaN
        let id = params.ids.head_audio.w;
        params.set.value_mut(id).data_mut()[0] = f64::NAN;
        let mut trainer = Trainer::new(params, &table, quick_cfg()).unwrap();
        match trainer.step_batch(&[&samples[0]]) {
            Err(TrainError::NonFiniteLoss { batch_start_id, .. }) => {
                assert_eq!(batch_start_id, samples[0].id);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let (samples, table) = tiny_setup(1);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let params = init_model(dims, 7);
        let report =
            full_model_grad_check(&samples[0], &params, &table, &quick_cfg()).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn fresh_model_on_zero_input_predicts_half_everywhere() {
        let (samples, table) = tiny_setup(1);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let params = init_model(dims, 12);
        let mut zeroed = samples[0].clone();
        zeroed.audio_features.data.iter_mut().for_each(|x| *x = 0.0);
        zeroed.visual_features.data.iter_mut().for_each(|x| *x = 0.0);
        let pred = forward(&zeroed, &table, &params, ForwardOptions::default()).unwrap();
        assert!(pred.p_audio.data().iter().all(|&p| p == 0.5));
        assert!(pred.p_visual.data().iter().all(|&p| p == 0.5));
        assert!(pred.p_av.data().iter().all(|&p| p == 0.25));
        assert!(pred.p_video.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn alpha_gate_gradient_is_nonzero_at_the_identity_init() {
        // the cross term enters linearly, so even at alpha = 0 the loss
        // slope with respect to the gate is generally nonzero
        let (samples, table) = tiny_setup(1);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let params = init_model(dims, 8);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mu = bound.var(params.ids.mu);
        let fwd = build_forward(
            &mut tape,
            &samples[0],
            &table,
            &params,
            &bound,
            ForwardOptions::default(),
        )
        .unwrap();
        let loss = total_loss(&mut tape, &fwd, &samples[0], mu, LossOptions::default()).unwrap();
        tape.backward(loss.optimized).unwrap();
        let g2 = tape.grad(bound.var(params.ids.cmim.alpha2)).unwrap().item();
        let g1 = tape.grad(bound.var(params.ids.cmim.alpha1)).unwrap().item();
        assert!(g1 != 0.0 && g2 != 0.0, "alpha grads: {g1}, {g2}");
    }

    #[test]
    fn saturated_heads_push_av_probability_to_one() {
        let (samples, table) = tiny_setup(1);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let mut params = init_model(dims, 13);
        for ids in [params.ids.head_audio, params.ids.head_visual] {
            let shape_w = params.set.value(ids.w).shape().to_vec();
            *params.set.value_mut(ids.w) = Tensor::zeros(&shape_w);
            *params.set.value_mut(ids.b) = Tensor::full(&[dims.c], 50.0);
        }
        let pred = forward(&samples[0], &table, &params, ForwardOptions::default()).unwrap();
        for (pav, (pa, pv)) in pred
            .p_av
            .data()
            .iter()
            .zip(pred.p_audio.data().iter().zip(pred.p_visual.data()))
        {
            assert!(pa > &0.999 && pv > &0.999);
            assert!(*pav > 0.999, "saturated logits must saturate p_av");
        }
    }

    #[test]
    fn thread_cap_defaults_to_one() {
        // do not set the env var here; just exercise the default path
        assert!(thread_cap() >= 1);
    }

    #[test]
    fn predict_corpus_matches_serial_forward() {
        let (samples, table) = tiny_setup(4);
        let dims = ModelDims::new(4, 6, 3, 6, 2);
        let params = init_model(dims, 9);
        let preds = predict_corpus(&params, &table, &samples, ForwardOptions::default()).unwrap();
        for (p, s) in preds.iter().zip(&samples) {
            let direct = forward(s, &table, &params, ForwardOptions::default()).unwrap();
            assert_eq!(*p, direct);
        }
    }
}
