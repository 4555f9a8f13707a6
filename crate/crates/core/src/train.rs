//! Losses, Adam, metrics and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::params::ParamSet;
use crate::potts::{threshold, Model};

/// Predictions are clamped to `[P_MIN, 1 - P_MIN]` inside the BCE logarithms.
pub const P_MIN: f64 = 1e-12;

/// Fraction of the dataset, taken from the end, held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bce,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyMode {
    /// Share of pixels where prediction and mask agree.
    #[default]
    Agreement,
    /// Share of pixels where prediction and mask are both foreground.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub accuracy_mode: AccuracyMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Bce,
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            accuracy_mode: AccuracyMode::Agreement,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean loss over pixels and its gradient with respect to `pred`.
pub fn loss_and_grad(pred: &Field, mask: &Field, kind: LossKind) -> Result<(f64, Field)> {
    pred.expect_same_shape(mask, "loss")?;
    let n = pred.data().len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.data().len());
    for (&p, &g) in pred.data().iter().zip(mask.data()) {
        match kind {
            LossKind::Bce => {
                let pc = p.clamp(P_MIN, 1.0 - P_MIN);
                total -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
                grad.push(if !(P_MIN..=1.0 - P_MIN).contains(&p) {
                    0.0
                } else {
                    (-g / pc + (1.0 - g) / (1.0 - pc)) / n
                });
            }
            LossKind::L2 => {
                total += (p - g) * (p - g);
                grad.push(2.0 * (p - g) / n);
            }
        }
    }
    let (h, w, c) = pred.shape();
    Ok((total / n, Field::from_vec(h, w, c, grad)?))
}

/// Moments of a bias-corrected Adam optimizer over a flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update of `params` in manifest order.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    adam_step_flat(params, &grads.flatten(), state, cfg)
}

pub(crate) fn adam_step_flat<P: ParamSet>(
    params: &mut P,
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.param_len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "optimizer layout mismatch: {n} parameters, {} gradients, {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    let mut i = 0;
    params.visit_mut(&mut |_, values| {
        for p in values.iter_mut() {
            let g = grads[i];
            let m = b1 * state.m[i] + (1.0 - b1) * g;
            let v = b2 * state.v[i] + (1.0 - b2) * g * g;
            state.m[i] = m;
            state.v[i] = v;
            *p -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
            i += 1;
        }
    });
    Ok(())
}

fn check_pairs(preds: &[Field], masks: &[Field]) -> Result<()> {
    if preds.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} masks",
            preds.len(),
            masks.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Shape("metrics need at least one image".into()));
    }
    for (p, m) in preds.iter().zip(masks) {
        p.expect_same_shape(m, "metric")?;
    }
    Ok(())
}

/// Mean per-image percentage; inputs are binary (`>= 0.5` counts as foreground).
pub fn accuracy(preds: &[Field], masks: &[Field], mode: AccuracyMode) -> Result<f64> {
    check_pairs(preds, masks)?;
    let mut sum = 0.0;
    for (p, m) in preds.iter().zip(masks) {
        let hits = p
            .data()
            .iter()
            .zip(m.data())
            .filter(|(&a, &b)| match mode {
                AccuracyMode::Agreement => (a >= 0.5) == (b >= 0.5),
                AccuracyMode::Literal => a >= 0.5 && b >= 0.5,
            })
            .count();
        sum += 100.0 * hits as f64 / p.data().len() as f64;
    }
    Ok(sum / preds.len() as f64)
}

/// Mean per-image `2|P ∧ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(preds: &[Field], masks: &[Field]) -> Result<f64> {
    check_pairs(preds, masks)?;
    let mut sum = 0.0;
    for (p, m) in preds.iter().zip(masks) {
        let (mut both, mut np, mut nm) = (0usize, 0usize, 0usize);
        for (&a, &b) in p.data().iter().zip(m.data()) {
            let (a, b) = (a >= 0.5, b >= 0.5);
            np += a as usize;
            nm += b as usize;
            both += (a && b) as usize;
        }
        sum += if np + nm == 0 {
            1.0
        } else {
            2.0 * both as f64 / (np + nm) as f64
        };
    }
    Ok(sum / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy_pct: f64,
    pub dice: f64,
    pub wall_seconds: f64,
}

/// Forward, threshold and score every sample.
pub fn evaluate(model: &Model, data: &Dataset, loss: LossKind, mode: AccuracyMode) -> Result<MetricsRecord> {
    let start = Instant::now();
    check_compatible(model, data)?;
    let mut preds = Vec::with_capacity(data.len());
    let mut total = 0.0;
    for (img, mask) in data.images.iter().zip(&data.masks) {
        let pred = model.predict(img)?;
        total += loss_and_grad(&pred, mask, loss)?.0;
        preds.push(threshold(&pred));
    }
    Ok(MetricsRecord {
        epoch: 0,
        mean_loss: total / data.len() as f64,
        accuracy_pct: accuracy(&preds, &data.masks, mode)?,
        dice: dice(&preds, &data.masks)?,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    data.validate()?;
    for (img, name) in data.images.iter().zip(&data.names) {
        model
            .check_input(img)
            .map_err(|e| Error::Shape(format!("sample {name}: {e}")))?;
    }
    Ok(())
}

/// Training and held-out index ranges. With fewer than three samples the
/// held-out part is empty and evaluation falls back to the training samples.
pub fn holdout_split(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let held = (n as f64 * HOLDOUT_FRACTION).round() as usize;
    (0..n - held, n - held..n)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// One row per epoch, scored on the held-out samples.
    pub history: Vec<MetricsRecord>,
}

pub fn train(model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    mut model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, data)?;
    let (train_range, held_range) = holdout_split(data.len());
    let held = if held_range.is_empty() {
        data.slice(train_range.clone())
    } else {
        data.slice(held_range)
    };
    let mut order: Vec<usize> = train_range.collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = model.param_len();
    let mut state = AdamState::new(n_params);
    let mut grad = vec![0.0; n_params];
    let mut history = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (pred, tape) = model.forward(&data.images[i])?;
                let (loss, upstream) = loss_and_grad(&pred, &data.masks[i], cfg.loss_kind)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss is {loss} at epoch {epoch}, step {step}, sample {}",
                        data.names[i]
                    )));
                }
                let g = model.backward(&tape, &upstream)?;
                let mut k = 0;
                g.visit(&mut |_, _, v| {
                    for &x in v {
                        grad[k] += scale * x;
                        k += 1;
                    }
                });
            }
            adam_step_flat(&mut model, &grad, &mut state, cfg)?;
            if !model.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite parameters after epoch {epoch}, step {step}"
                )));
            }
        }
        let mut record = evaluate(&model, &held, cfg.loss_kind, cfg.accuracy_mode)?;
        record.epoch = epoch;
        record.wall_seconds = start.elapsed().as_secs_f64();
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}
