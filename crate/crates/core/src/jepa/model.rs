use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::dsp::PatchGrid;
use crate::masking::MaskSpec;
use crate::rng::{self, streams};
use crate::vit::{self, Bound, ParameterSet, TokenSequence, ViTConfig};
use crate::{Error, Real, Result, Tensor};

/// Context encoder, EMA target encoder, predictor and mask token.
#[derive(Clone, Debug, PartialEq)]
pub struct JepaModel<T> {
    pub encoder: ViTConfig,
    pub predictor: ViTConfig,
    pub ctx: ParameterSet<T>,
    pub tgt: ParameterSet<T>,
    pub pred: ParameterSet<T>,
    /// Learned placeholder for masked positions, predictor width.
    pub mask_token: Tensor<T>,
}

fn check_configs(encoder: &ViTConfig, predictor: &ViTConfig) -> Result<()> {
    encoder.validate()?;
    predictor.validate()?;
    if predictor.input_dim != encoder.out_dim() {
        return Err(Error::InvalidConfig(format!(
            "predictor input_dim {} must equal the encoder width {}",
            predictor.input_dim,
            encoder.out_dim()
        )));
    }
    if predictor.output_dim != Some(encoder.out_dim()) {
        return Err(Error::InvalidConfig(format!(
            "predictor must re-project to the encoder width {}, got {:?}",
            encoder.out_dim(),
            predictor.output_dim
        )));
    }
    Ok(())
}

impl<T: Real> JepaModel<T> {
    /// Fresh model; the target encoder starts as an exact copy of the context
    /// encoder.
    pub fn new(encoder: ViTConfig, predictor: ViTConfig, seed: u64) -> Result<Self> {
        check_configs(&encoder, &predictor)?;
        let ctx = vit::init_parameters(&encoder, &mut rng::stream(seed, streams::INIT))?;
        let pred = vit::init_parameters(&predictor, &mut rng::stream(seed, streams::INIT + 1))?;
        let mut g = rng::stream(seed, streams::INIT + 2);
        let mask_token = (0..predictor.embed_dim)
            .map(|_| T::from_f64(rng::trunc_normal(&mut g, 0.02, 3.0)))
            .collect();
        let mask_token = Tensor::from_vec(&[predictor.embed_dim], mask_token)?;
        Ok(JepaModel {
            tgt: ctx.clone(),
            encoder,
            predictor,
            ctx,
            pred,
            mask_token,
        })
    }

    /// Reassemble a model from stored parts, checking every shape.
    pub fn from_parts(
        encoder: ViTConfig,
        predictor: ViTConfig,
        ctx: ParameterSet<T>,
        tgt: ParameterSet<T>,
        pred: ParameterSet<T>,
        mask_token: Tensor<T>,
    ) -> Result<Self> {
        check_configs(&encoder, &predictor)?;
        let expect = |cfg: &ViTConfig, set: &ParameterSet<T>, which: &str| -> Result<()> {
            let shapes = cfg.parameter_shapes();
            if shapes.len() != set.len()
                || shapes.iter().zip(set.iter()).any(|((n, s), (m, t))| n != m || s[..] != *t.shape())
            {
                return Err(Error::ShapeMismatch(format!("{which} parameters do not match its configuration")));
            }
            Ok(())
        };
        expect(&encoder, &ctx, "context encoder")?;
        expect(&encoder, &tgt, "target encoder")?;
        expect(&predictor, &pred, "predictor")?;
        if mask_token.shape() != [predictor.embed_dim] {
            return Err(Error::ShapeMismatch(format!(
                "mask token has shape {:?}, expected [{}]",
                mask_token.shape(),
                predictor.embed_dim
            )));
        }
        Ok(JepaModel {
            encoder,
            predictor,
            ctx,
            tgt,
            pred,
            mask_token,
        })
    }

    /// Scalars updated by the optimizer: context encoder, predictor, mask token.
    pub fn trainable_count(&self) -> usize {
        vit::count_parameters(&self.ctx) + vit::count_parameters(&self.pred) + self.mask_token.len()
    }

    /// Scalars needed at inference: one encoder.
    pub fn inference_count(&self) -> usize {
        vit::count_parameters(&self.tgt)
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if grid.patch_dim() != self.encoder.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "patch length {} does not match encoder input_dim {}",
                grid.patch_dim(),
                self.encoder.input_dim
            )));
        }
        Ok(())
    }
}

fn check_mask(grid: &PatchGrid, mask: &MaskSpec) -> Result<()> {
    if mask.num_patches() != grid.num_patches() {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} patches, grid has {}",
            mask.num_patches(),
            grid.num_patches()
        )));
    }
    if mask.visible().is_empty() {
        return Err(Error::DegenerateMask {
            num_patches: mask.num_patches(),
            masked: mask.masked().len(),
        });
    }
    Ok(())
}

pub(crate) fn patch_rows<T: Real>(grid: &PatchGrid, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * grid.patch_dim());
    for &i in indices {
        out.extend(grid.patch(i).iter().map(|&v| T::from_f64(v as f64)));
    }
    out
}

pub(crate) fn positions(grid: &PatchGrid, indices: &[usize]) -> Vec<(usize, usize)> {
    indices.iter().map(|&i| grid.position(i)).collect()
}

pub(crate) fn context_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    ctx: &Bound<'a>,
    encoder: &ViTConfig,
    grid: &PatchGrid,
    mask: &MaskSpec,
) -> Result<Var> {
    let input = tape.constant_owned(mask.visible().len(), grid.patch_dim(), patch_rows(grid, mask.visible()))?;
    Ok(vit::encode_on_tape(tape, ctx, encoder, input, &positions(grid, mask.visible()))?.0)
}

/// Predictor over `[projected context ; mask tokens]`, read out at the mask
/// slots and re-projected. `grid_w` maps patch indices to coordinates.
#[allow(clippy::too_many_arguments)]
pub(crate) fn predict_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    pred: &Bound<'a>,
    mask_token: Var,
    predictor: &ViTConfig,
    context: Var,
    mask: &MaskSpec,
    grid_w: usize,
) -> Result<Var> {
    let coord = |i: &usize| (i / grid_w, i % grid_w);
    let visible: Vec<(usize, usize)> = mask.visible().iter().map(coord).collect();
    let masked: Vec<(usize, usize)> = mask.masked().iter().map(coord).collect();
    let dim = predictor.embed_dim;

    let x = tape.linear(context, pred.get("input_proj.weight")?, Some(pred.get("input_proj.bias")?))?;
    let x = vit::add_positions_on_tape(tape, x, &visible, dim)?;
    let m = tape.repeat_row(mask_token, masked.len())?;
    let m = vit::add_positions_on_tape(tape, m, &masked, dim)?;
    let seq = tape.concat_rows(x, m)?;
    let (h, _) = vit::blocks_on_tape(tape, pred, predictor, seq)?;
    let slots: Vec<usize> = (visible.len()..visible.len() + masked.len()).collect();
    let h = tape.gather_rows(h, &slots)?;
    vit::head_on_tape(tape, pred, predictor, h)
}

/// `(1/|M|) Σ ‖pred_j − target_j‖²` with `target` already restricted to the
/// masked rows.
pub(crate) fn loss_on_tape<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target_rows: Vec<T>) -> Result<Var> {
    let (rows, cols) = tape.shape(pred);
    let target = tape.constant_owned(rows, cols, target_rows)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, T::ONE / T::from_usize(rows)))
}

fn sequence<T: Real>(tape: &Tape<'_, T>, out: Var, positions: Vec<(usize, usize)>, grid: (usize, usize)) -> Result<TokenSequence<T>> {
    TokenSequence::new(tape.to_tensor(out), positions, grid)
}

/// Context encoder over the visible patches, at their true grid positions.
pub fn forward_context<T: Real>(model: &JepaModel<T>, grid: &PatchGrid, mask: &MaskSpec) -> Result<TokenSequence<T>> {
    model.check_grid(grid)?;
    check_mask(grid, mask)?;
    let mut tape = Tape::new();
    let ctx = model.ctx.bind(&mut tape, false);
    let out = context_on_tape(&mut tape, &ctx, &model.encoder, grid, mask)?;
    sequence(&tape, out, positions(grid, mask.visible()), (grid.grid_h(), grid.grid_w()))
}

/// Target encoder over every patch. Nothing here is differentiated.
pub fn forward_target<T: Real>(model: &JepaModel<T>, grid: &PatchGrid) -> Result<TokenSequence<T>> {
    model.check_grid(grid)?;
    let all: Vec<usize> = (0..grid.num_patches()).collect();
    let tokens = Tensor::from_vec(&[all.len(), grid.patch_dim()], patch_rows(grid, &all))?;
    let seq = TokenSequence::new(tokens, positions(grid, &all), (grid.grid_h(), grid.grid_w()))?;
    vit::encode(&model.tgt, &model.encoder, &seq)
}

/// Predicted embeddings at the masked positions, one per masked index in
/// ascending order.
pub fn predict_masked<T: Real>(
    model: &JepaModel<T>,
    context: &TokenSequence<T>,
    mask: &MaskSpec,
    grid: (usize, usize),
) -> Result<TokenSequence<T>> {
    let (grid_h, grid_w) = grid;
    if mask.num_patches() != grid_h * grid_w {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} patches, grid is {grid_h}x{grid_w}",
            mask.num_patches()
        )));
    }
    let expected: Vec<(usize, usize)> = mask.visible().iter().map(|i| (i / grid_w, i % grid_w)).collect();
    if context.positions != expected {
        return Err(Error::ShapeMismatch(String::from(
            "context tokens do not correspond to the mask's visible patches",
        )));
    }
    if context.width() != model.predictor.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "context width {} does not match predictor input_dim {}",
            context.width(),
            model.predictor.input_dim
        )));
    }
    let mut tape = Tape::new();
    let pred = model.pred.bind(&mut tape, false);
    let token = tape.constant_owned(1, model.mask_token.len(), model.mask_token.data().to_vec())?;
    let ctx = tape.constant(&context.tokens);
    let out = predict_on_tape(&mut tape, &pred, token, &model.predictor, ctx, mask, grid_w)?;
    let masked = mask.masked().iter().map(|i| (i / grid_w, i % grid_w)).collect();
    sequence(&tape, out, masked, grid)
}

/// Mean over masked patches of the squared Euclidean distance between the
/// prediction and the target token at that patch.
pub fn jepa_loss<T: Real>(pred: &TokenSequence<T>, target: &TokenSequence<T>, mask: &MaskSpec) -> Result<T> {
    if pred.len() != mask.masked().len() {
        return Err(Error::LengthMismatch {
            expected: mask.masked().len(),
            actual: pred.len(),
        });
    }
    if target.len() != mask.num_patches() {
        return Err(Error::LengthMismatch {
            expected: mask.num_patches(),
            actual: target.len(),
        });
    }
    if pred.width() != target.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction width {} vs target width {}",
            pred.width(),
            target.width()
        )));
    }
    let total: f64 = mask
        .masked()
        .iter()
        .enumerate()
        .map(|(slot, &j)| {
            pred.token(slot)
                .iter()
                .zip(target.token(j))
                .map(|(&p, &t)| {
                    let d = p.to_f64() - t.to_f64();
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(T::from_f64(total / mask.masked().len() as f64))
}

/// `τ·target + (1 − τ)·context`, element-wise over every tensor.
pub fn ema_update<T: Real>(tgt: &ParameterSet<T>, ctx: &ParameterSet<T>, tau: f64) -> Result<ParameterSet<T>> {
    let mut out = tgt.clone();
    ema_update_in_place(&mut out, ctx, tau)?;
    Ok(out)
}

pub fn ema_update_in_place<T: Real>(tgt: &mut ParameterSet<T>, ctx: &ParameterSet<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("EMA decay must lie in [0, 1], got {tau}")));
    }
    tgt.check_same_layout(ctx)?;
    let (keep, take) = (T::from_f64(tau), T::from_f64(1.0 - tau));
    for ((_, t), (_, c)) in tgt.iter_mut().zip(ctx.iter()) {
        for (t, &c) in t.data_mut().iter_mut().zip(c.data()) {
            *t = keep * *t + take * c;
        }
    }
    Ok(())
}

/// Tensors touched by the optimizer. Used for gradients and both Adam moments;
/// the target encoder has no place here.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable<T> {
    pub ctx: ParameterSet<T>,
    pub pred: ParameterSet<T>,
    pub mask_token: Tensor<T>,
}

impl<T: Real> Trainable<T> {
    pub fn zeros_like(model: &JepaModel<T>) -> Self {
        Trainable {
            ctx: model.ctx.zeros_like(),
            pred: model.pred.zeros_like(),
            mask_token: Tensor::zeros(model.mask_token.shape()),
        }
    }

    /// Tensors with qualified names (`ctx.*`, `pred.*`, `mask_token`).
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(self.ctx.iter().map(|(n, t)| (format!("ctx.{n}"), t)));
        out.extend(self.pred.iter().map(|(n, t)| (format!("pred.{n}"), t)));
        out.push((String::from("mask_token"), &self.mask_token));
        out
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.ctx
            .iter_mut()
            .map(|(_, t)| t)
            .chain(self.pred.iter_mut().map(|(_, t)| t))
            .chain(core::iter::once(&mut self.mask_token))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.ctx
            .iter()
            .map(|(_, t)| t)
            .chain(self.pred.iter().map(|(_, t)| t))
            .chain(core::iter::once(&self.mask_token))
    }

    pub fn check_same_layout(&self, model: &JepaModel<T>) -> Result<()> {
        self.ctx.check_same_layout(&model.ctx)?;
        self.pred.check_same_layout(&model.pred)?;
        if self.mask_token.shape() != model.mask_token.shape() {
            return Err(Error::ShapeMismatch(String::from("mask token shape")));
        }
        Ok(())
    }

    /// Global L2 norm over every tensor.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.tensors().map(|t| t.sum_squares()).sum())
    }
}
