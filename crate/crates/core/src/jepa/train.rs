use alloc::vec::Vec;

use rand::Rng;

use super::model::{context_on_tape, loss_on_tape, predict_on_tape};
use super::{adamw_step, ema_update_in_place, forward_target, lr_schedule, tau_schedule};
use super::{JepaModel, OptimizerConfig, Trainable};
use crate::autodiff::{Gradients, Tape};
use crate::dsp::PatchGrid;
use crate::masking::{sample_batch_ratio, sample_mask, MaskSpec};
use crate::rng::{self, streams, Generator};
use crate::vit::{Bound, ParameterSet, TokenSequence};
use crate::{Error, Real, Result, Stage, Tensor};

/// Scalars reported after each update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Index of the update these metrics describe (0-based).
    pub step: u64,
    pub loss: f64,
    /// Per-dimension variance of the target embeddings over every token of
    /// the batch, averaged over dimensions.
    pub target_var_mean: f64,
    /// Smallest per-dimension variance. Near zero means collapse.
    pub target_var_min: f64,
    /// Global L2 norm of the batch-averaged gradient.
    pub grad_norm: f64,
    pub lr: f64,
    pub tau: f64,
    pub mask_ratio: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Completed updates.
    pub step: u64,
    pub model: JepaModel<T>,
    /// Adam first moments.
    pub m: Trainable<T>,
    /// Adam second moments.
    pub v: Trainable<T>,
    pub optimizer: OptimizerConfig,
    /// Interval the per-batch mask ratio is drawn from.
    pub mask_bounds: (f64, f64),
    pub seed: u64,
    pub last_metrics: Option<StepMetrics>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: JepaModel<T>, optimizer: OptimizerConfig, mask_bounds: (f64, f64), seed: u64) -> Result<Self> {
        optimizer.validate()?;
        let (lo, hi) = mask_bounds;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "mask ratio bounds must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
            )));
        }
        Ok(TrainState {
            step: 0,
            m: Trainable::zeros_like(&model),
            v: Trainable::zeros_like(&model),
            model,
            optimizer,
            mask_bounds,
            seed,
            last_metrics: None,
        })
    }

    /// Generator for the next update. Depends only on the seed and the step
    /// counter, so a resumed run draws the same masks.
    pub fn step_rng(&self) -> Generator {
        rng::stream(self.seed, streams::TRAIN + self.step)
    }
}

fn check_stage<T: Real>(values: &[T], stage: Stage) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(stage))
    }
}

fn collect<T: Real>(set: &ParameterSet<T>, bound: &Bound<'_>, grads: &Gradients<T>) -> Result<ParameterSet<T>> {
    let entries = set
        .iter()
        .zip(bound.iter())
        .map(|((name, t), (_, var))| {
            let g = grads.get_or_zeros(var, t.len());
            Ok((alloc::string::String::from(name), Tensor::from_vec(t.shape(), g)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterSet::new(entries)
}

/// Loss and gradients for one example under a given mask. The target encoder
/// only appears as constants, so it receives no gradient. Also returns the
/// target tokens.
pub fn example_gradients<T: Real>(
    model: &JepaModel<T>,
    grid: &PatchGrid,
    mask: &MaskSpec,
) -> Result<(f64, Trainable<T>, TokenSequence<T>)> {
    let target = forward_target(model, grid)?;
    check_stage(target.tokens.data(), Stage::Target)?;
    if mask.num_patches() != grid.num_patches() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "mask covers {} patches, grid has {}",
            mask.num_patches(),
            grid.num_patches()
        )));
    }

    let mut tape = Tape::new();
    let ctx = model.ctx.bind(&mut tape, true);
    let pred = model.pred.bind(&mut tape, true);
    let token = tape.param(&model.mask_token);

    let context = context_on_tape(&mut tape, &ctx, &model.encoder, grid, mask)?;
    check_stage(tape.value(context), Stage::Context)?;
    let predicted = predict_on_tape(&mut tape, &pred, token, &model.predictor, context, mask, grid.grid_w())?;
    check_stage(tape.value(predicted), Stage::Predictor)?;

    let mut target_rows = Vec::with_capacity(mask.masked().len() * target.width());
    for &j in mask.masked() {
        target_rows.extend_from_slice(target.token(j));
    }
    let loss = loss_on_tape(&mut tape, predicted, target_rows)?;
    let value = tape.value(loss)[0];
    check_stage(&[value], Stage::Loss)?;

    let grads = tape.backward(loss)?;
    let trainable = Trainable {
        ctx: collect(&model.ctx, &ctx, &grads)?,
        pred: collect(&model.pred, &pred, &grads)?,
        mask_token: Tensor::from_vec(
            model.mask_token.shape(),
            grads.get_or_zeros(token, model.mask_token.len()),
        )?,
    };
    Ok((value.to_f64(), trainable, target))
}

fn target_variance<T: Real>(targets: &[TokenSequence<T>]) -> (f64, f64) {
    let width = targets[0].width();
    let mut sum = alloc::vec![0.0f64; width];
    let mut sq = alloc::vec![0.0f64; width];
    let mut n = 0usize;
    for t in targets {
        for i in 0..t.len() {
            for (k, &x) in t.token(i).iter().enumerate() {
                let x = x.to_f64();
                sum[k] += x;
                sq[k] += x * x;
            }
            n += 1;
        }
    }
    let vars: Vec<f64> = sum
        .iter()
        .zip(&sq)
        .map(|(&s, &q)| {
            let mean = s / n as f64;
            (q / n as f64 - mean * mean).max(0.0)
        })
        .collect();
    let mean = vars.iter().sum::<f64>() / width as f64;
    let min = vars.iter().copied().fold(f64::INFINITY, f64::min);
    (mean, min)
}

/// One optimisation step on `batch`.
///
/// A single mask ratio is drawn for the batch, then an independent mask per
/// example. Loss and gradients are averaged over the batch, AdamW updates the
/// context encoder, predictor and mask token, and the target encoder then
/// moves toward the updated context encoder by EMA. On error `state` is left
/// unchanged.
pub fn train_step<T: Real, R: Rng + ?Sized>(
    state: &mut TrainState<T>,
    batch: &[PatchGrid],
    rng: &mut R,
) -> Result<StepMetrics> {
    let first = batch.first().ok_or(Error::EmptyInput)?;
    if let Some(g) = batch.iter().find(|g| g.num_patches() != first.num_patches()) {
        return Err(Error::ShapeMismatch(alloc::format!(
            "batch mixes grids of {} and {} patches",
            first.num_patches(),
            g.num_patches()
        )));
    }
    let (lo, hi) = state.mask_bounds;
    let ratio = sample_batch_ratio(rng, lo, hi)?;
    let masks = batch
        .iter()
        .map(|g| sample_mask(rng, g.num_patches(), ratio))
        .collect::<Result<Vec<_>>>()?;

    let mut total = Trainable::zeros_like(&state.model);
    let mut loss = 0.0;
    let mut targets = Vec::with_capacity(batch.len());
    for (grid, mask) in batch.iter().zip(&masks) {
        let (l, grads, target) = example_gradients(&state.model, grid, mask)?;
        loss += l;
        for (acc, g) in total.tensors_mut().zip(grads.tensors()) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        targets.push(target);
    }
    let inv = T::ONE / T::from_usize(batch.len());
    for t in total.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    loss /= batch.len() as f64;
    let grad_norm = total.norm();
    let (target_var_mean, target_var_min) = target_variance(&targets);

    let step = state.step;
    let lr = lr_schedule(step, &state.optimizer);
    let tau = tau_schedule(step, &state.optimizer);

    let mut model = state.model.clone();
    let (mut m, mut v) = (state.m.clone(), state.v.clone());
    adamw_step(&mut model, &total, &mut m, &mut v, step, lr, &state.optimizer)?;
    ema_update_in_place(&mut model.tgt, &model.ctx, tau)?;

    let metrics = StepMetrics {
        step,
        loss,
        target_var_mean,
        target_var_min,
        grad_norm,
        lr,
        tau,
        mask_ratio: ratio,
    };
    state.model = model;
    state.m = m;
    state.v = v;
    state.step += 1;
    state.last_metrics = Some(metrics.clone());
    Ok(metrics)
}
