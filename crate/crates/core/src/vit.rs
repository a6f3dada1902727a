//! Minimal Vision Transformer used for both encoders and the predictor.
//!
//! Tokens are projected to the embedding width, receive a fixed 2D sin-cos
//! encoding of their grid coordinate, pass through pre-norm transformer
//! blocks (LN → MHSA → residual, LN → GELU MLP → residual), a final LN, and
//! an optional linear re-projection. There is no class token.
//!
//! Parameters are kept in a [`ParameterSet`]: a list of named tensors whose
//! names and order are fixed by the configuration. Linear weights are stored
//! `[in, out]`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::{rng, Error, Real, Result, Stage, Tensor};

/// Transformer geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    /// Width of the incoming tokens (flattened patch length for encoders).
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Number of transformer blocks. Zero leaves a projection-only network.
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Width of the final re-projection, if any.
    pub output_dim: Option<usize>,
}

impl ViTConfig {
    /// Context/target encoder: 16×16 patches, 768 wide, 12 blocks, 12 heads.
    pub fn encoder_default() -> Self {
        ViTConfig {
            input_dim: 256,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            output_dim: None,
        }
    }

    /// Predictor: 384 wide, 6 blocks, 12 heads, re-projected to 768.
    pub fn predictor_default() -> Self {
        ViTConfig {
            input_dim: 768,
            embed_dim: 384,
            depth: 6,
            num_heads: 12,
            mlp_ratio: 4.0,
            output_dim: Some(768),
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        libm::round(self.embed_dim as f64 * self.mlp_ratio) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Width of the tokens `encode` returns.
    pub fn out_dim(&self) -> usize {
        self.output_dim.unwrap_or(self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.embed_dim == 0 {
            return bad("input_dim and embed_dim must be positive".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return bad(format!(
                "embed_dim {} must be divisible by 4 for 2D sin-cos positions",
                self.embed_dim
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if self.output_dim == Some(0) {
            return bad("output_dim must be positive when set".into());
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let mut out = vec![
            ("input_proj.weight".to_string(), vec![self.input_dim, d]),
            ("input_proj.bias".to_string(), vec![d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.scale"), vec![d]),
                (p("norm1.shift"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.scale"), vec![d]),
                (p("norm2.shift"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, h]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![h, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.push(("norm.scale".to_string(), vec![d]));
        out.push(("norm.shift".to_string(), vec![d]));
        if let Some(o) = self.output_dim {
            out.push(("output_proj.weight".to_string(), vec![d, o]));
            out.push(("output_proj.bias".to_string(), vec![o]));
        }
        out
    }

    /// Scalar count implied by the configuration, without allocating.
    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(ParameterSet { entries })
    }

    /// Zero tensors shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }

    /// Error unless `other` has the same names, order and shapes.
    pub fn check_same_layout<U: Real>(&self, other: &ParameterSet<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter sets hold {} and {} tensors",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{a}` {:?} vs `{b}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.sum_squares()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Bind every tensor to `tape`, as parameters or as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Bound<'a> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable { tape.param(t) } else { tape.constant(t) };
                (n.as_str(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Total scalar count of a parameter set.
pub fn count_parameters<T: Real>(params: &ParameterSet<T>) -> usize {
    params.iter().map(|(_, t)| t.len()).sum()
}

/// Tape handles for a bound [`ParameterSet`].
pub struct Bound<'a> {
    vars: Vec<(&'a str, Var)>,
}

impl<'a> Bound<'a> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a str, Var)> + '_ {
        self.vars.iter().copied()
    }
}

/// Tokens with their grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub positions: Vec<(usize, usize)>,
    pub grid: (usize, usize),
}

impl<T: Real> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, positions: Vec<(usize, usize)>, grid: (usize, usize)) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != positions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} tokens for {} positions",
                tokens.shape(),
                positions.len()
            )));
        }
        if let Some(&(r, c)) = positions.iter().find(|&&(r, c)| r >= grid.0 || c >= grid.1) {
            return Err(Error::InvalidArgument(format!(
                "position ({r}, {c}) is outside the {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(TokenSequence { tokens, positions, grid })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, i: usize) -> &[T] {
        self.tokens.row(i)
    }
}

/// Truncated-normal (σ = 0.02, cut at ±3σ) weights, zero biases and LN
/// shifts, unit LN scales.
pub fn init_parameters<T: Real, R: Rng + ?Sized>(config: &ViTConfig, rng: &mut R) -> Result<ParameterSet<T>> {
    config.validate()?;
    let entries = config
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let tensor = if name.ends_with(".weight") {
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::from_f64(rng::trunc_normal(rng, 0.02, 3.0))).collect();
                Tensor::from_vec(&shape, data).expect("shape product matches")
            } else if name.ends_with(".scale") {
                Tensor::full(&shape, T::ONE)
            } else {
                Tensor::zeros(&shape)
            };
            (name, tensor)
        })
        .collect();
    ParameterSet::new(entries)
}

/// Fixed 2D sin-cos encoding of one grid coordinate.
///
/// The first half of the vector encodes the row, the second half the column;
/// each half is `[sin(p·ω_k)…, cos(p·ω_k)…]` with `ω_k = 10000^(-k / (dim/4))`.
pub fn position_encoding(row: usize, col: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for p in [row, col] {
        let omegas = (0..quarter).map(|k| libm::pow(10000.0, -(k as f64) / quarter as f64));
        let angles: Vec<f64> = omegas.map(|w| p as f64 * w).collect();
        out.extend(angles.iter().map(|&a| libm::sin(a)));
        out.extend(angles.iter().map(|&a| libm::cos(a)));
    }
    out
}

/// Table `[grid_h·grid_w × dim]` of [`position_encoding`], row-major over
/// the grid.
pub fn sincos_pos_encoding(grid_h: usize, grid_w: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding width {dim} must be a positive multiple of 4"
        )));
    }
    let mut table = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            table.extend(position_encoding(r, c, dim));
        }
    }
    Ok(table)
}

fn positions_on_tape<'a, T: Real>(tape: &mut Tape<'a, T>, positions: &[(usize, usize)], dim: usize) -> Result<Var> {
    let mut values = Vec::with_capacity(positions.len() * dim);
    for &(r, c) in positions {
        values.extend(position_encoding(r, c, dim).into_iter().map(T::from_f64));
    }
    tape.constant_owned(positions.len(), dim, values)
}

/// Input projection plus positional encoding.
pub fn embed_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &Bound<'a>,
    config: &ViTConfig,
    input: Var,
    positions: &[(usize, usize)],
) -> Result<Var> {
    let projected = tape.linear(input, params.get("input_proj.weight")?, Some(params.get("input_proj.bias")?))?;
    let pos = positions_on_tape(tape, positions, config.embed_dim)?;
    tape.add(projected, pos)
}

/// Add positional encodings to tokens that are already `embed_dim` wide.
pub fn add_positions_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    tokens: Var,
    positions: &[(usize, usize)],
    dim: usize,
) -> Result<Var> {
    let pos = positions_on_tape(tape, positions, dim)?;
    tape.add(tokens, pos)
}

/// Transformer blocks followed by the final layer norm. Returns the
/// normalized tokens and the attention node of every block.
pub fn blocks_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &Bound<'a>,
    config: &ViTConfig,
    mut h: Var,
) -> Result<(Var, Vec<Var>)> {
    let mut attention = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let p = |s: &str| params.get(&format!("blocks.{i}.{s}"));
        let x = tape.layer_norm(h, p("norm1.scale")?, p("norm1.shift")?)?;
        let qkv = tape.linear(x, p("attn.qkv.weight")?, Some(p("attn.qkv.bias")?))?;
        let a = tape.attention(qkv, config.num_heads)?;
        attention.push(a);
        let a = tape.linear(a, p("attn.proj.weight")?, Some(p("attn.proj.bias")?))?;
        h = tape.add(h, a)?;
        let x = tape.layer_norm(h, p("norm2.scale")?, p("norm2.shift")?)?;
        let x = tape.linear(x, p("mlp.fc1.weight")?, Some(p("mlp.fc1.bias")?))?;
        let x = tape.gelu(x);
        let x = tape.linear(x, p("mlp.fc2.weight")?, Some(p("mlp.fc2.bias")?))?;
        h = tape.add(h, x)?;
    }
    let out = tape.layer_norm(h, params.get("norm.scale")?, params.get("norm.shift")?)?;
    Ok((out, attention))
}

/// Optional final re-projection.
pub fn head_on_tape<'a, T: Real>(tape: &mut Tape<'a, T>, params: &Bound<'a>, config: &ViTConfig, h: Var) -> Result<Var> {
    match config.output_dim {
        Some(_) => tape.linear(h, params.get("output_proj.weight")?, Some(params.get("output_proj.bias")?)),
        None => Ok(h),
    }
}

/// Full encoder forward on a tape.
pub fn encode_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &Bound<'a>,
    config: &ViTConfig,
    input: Var,
    positions: &[(usize, usize)],
) -> Result<(Var, Vec<Var>)> {
    let h = embed_on_tape(tape, params, config, input, positions)?;
    let (h, attention) = blocks_on_tape(tape, params, config, h)?;
    Ok((head_on_tape(tape, params, config, h)?, attention))
}

fn check_input<T: Real>(config: &ViTConfig, tokens: &TokenSequence<T>) -> Result<()> {
    config.validate()?;
    if tokens.width() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "token width {} does not match input_dim {}",
            tokens.width(),
            config.input_dim
        )));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Encode a token sequence; positions are carried through unchanged.
pub fn encode<T: Real>(params: &ParameterSet<T>, config: &ViTConfig, tokens: &TokenSequence<T>) -> Result<TokenSequence<T>> {
    Ok(encode_with_attention(params, config, tokens)?.0)
}

/// [`encode`], also returning each block's attention maps
/// (`[heads][query][key]`).
pub fn encode_with_attention<T: Real>(
    params: &ParameterSet<T>,
    config: &ViTConfig,
    tokens: &TokenSequence<T>,
) -> Result<(TokenSequence<T>, Vec<Vec<T>>)> {
    check_input(config, tokens)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let input = tape.constant(&tokens.tokens);
    let (out, attention) = encode_on_tape(&mut tape, &bound, config, input, &tokens.positions)?;
    let maps = attention
        .iter()
        .map(|&a| tape.attention_probs(a).map(|(p, _)| p.to_vec()).unwrap_or_default())
        .collect();
    let seq = TokenSequence::new(tape.to_tensor(out), tokens.positions.clone(), tokens.grid)?;
    Ok((seq, maps))
}

/// Gradient of a scalar loss built on a tape with respect to every tensor of
/// `params`. `loss` receives the tape and the parameters bound as trainable
/// leaves and returns the `1 × 1` loss node.
pub fn gradients<'p, T, F>(params: &'p ParameterSet<T>, loss: F) -> Result<(T, ParameterSet<T>)>
where
    T: Real,
    F: FnOnce(&mut Tape<'p, T>, &Bound<'p>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let out = loss(&mut tape, &bound)?;
    let value = tape.value(out).first().copied().unwrap_or(T::ZERO);
    if tape.shape(out) != (1, 1) {
        return Err(Error::ShapeMismatch(format!("loss must be 1x1, got {:?}", tape.shape(out))));
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(Stage::Loss));
    }
    let grads = tape.backward(out)?;
    let entries = params
        .iter()
        .zip(bound.iter())
        .map(|((name, t), (_, var))| {
            let g = grads.get_or_zeros(var, t.len());
            (name.to_string(), Tensor::from_vec(t.shape(), g).expect("gradient matches shape"))
        })
        .collect();
    Ok((value, ParameterSet { entries }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::generator;

    fn toy() -> ViTConfig {
        ViTConfig {
            input_dim: 6,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 4.0,
            output_dim: Some(4),
        }
    }

    fn tokens(n: usize, width: usize, grid: (usize, usize)) -> TokenSequence<f64> {
        let data = (0..n * width).map(|i| libm::sin(i as f64 * 0.7) * 0.8).collect();
        let positions = (0..n).map(|i| (i / grid.1, i % grid.1)).collect();
        TokenSequence::new(Tensor::from_vec(&[n, width], data).unwrap(), positions, grid).unwrap()
    }

    #[test]
    fn table_one_counts() {
        let enc = ViTConfig::encoder_default().parameter_count() as f64;
        let pred = ViTConfig::predictor_default().parameter_count() as f64;
        assert!((enc / 85.4e6 - 1.0).abs() < 0.02, "{enc}");
        assert!((pred / 11.3e6 - 1.0).abs() < 0.05, "{pred}");
    }

    #[test]
    fn hand_counted_toy() {
        // dim 4, 1 block, 1 head, mlp ratio 1, input 2, no head:
        // input proj 2*4+4 = 12; block: ln 8, qkv 4*12+12 = 60, proj 20,
        // ln 8, fc1 20, fc2 20 = 136; final ln 8. Total 156.
        let cfg = ViTConfig {
            input_dim: 2,
            embed_dim: 4,
            depth: 1,
            num_heads: 1,
            mlp_ratio: 1.0,
            output_dim: None,
        };
        assert_eq!(cfg.parameter_count(), 156);
        let params: ParameterSet<f32> = init_parameters(&cfg, &mut generator(0)).unwrap();
        assert_eq!(count_parameters(&params), 156);
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let a: ParameterSet<f32> = init_parameters(&toy(), &mut generator(9)).unwrap();
        let b: ParameterSet<f32> = init_parameters(&toy(), &mut generator(9)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with(".scale") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".bias") || name.ends_with(".shift") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_weight_statistics() {
        let cfg = ViTConfig::encoder_default();
        let cfg = ViTConfig { depth: 0, ..cfg };
        let params: ParameterSet<f32> = init_parameters(&cfg, &mut generator(1)).unwrap();
        let w = params.get("input_proj.weight").unwrap();
        assert!(w.len() >= 10_000);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.1, "std {std}");
        assert!(w.data().iter().all(|v| v.abs() <= 0.06 + 1e-6));
    }

    #[test]
    fn positional_encoding_properties() {
        let t = sincos_pos_encoding(8, 16, 32).unwrap();
        let origin = &t[..32];
        for half in [0, 16] {
            assert!(origin[half..half + 8].iter().all(|&v| v == 0.0));
            assert!(origin[half + 8..half + 16].iter().all(|&v| v == 1.0));
        }
        let rows: Vec<&[f64]> = t.chunks(32).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dist: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(dist > 1e-6, "positions {i} and {j} collide");
            }
        }
        assert_eq!(t, sincos_pos_encoding(8, 16, 32).unwrap());
        assert!(sincos_pos_encoding(2, 2, 6).is_err());
    }

    #[test]
    fn encode_shapes() {
        let cfg = toy();
        let params: ParameterSet<f64> = init_parameters(&cfg, &mut generator(2)).unwrap();
        let out = encode(&params, &cfg, &tokens(1, 6, (2, 2))).unwrap();
        assert_eq!((out.len(), out.width()), (1, 4));
        let no_head = ViTConfig { output_dim: None, ..cfg.clone() };
        let params: ParameterSet<f64> = init_parameters(&no_head, &mut generator(2)).unwrap();
        let out = encode(&params, &no_head, &tokens(5, 6, (2, 3))).unwrap();
        assert_eq!((out.len(), out.width()), (5, 8));
        assert!(encode(&params, &no_head, &tokens(3, 5, (2, 2))).is_err());
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let cfg = toy();
        let params: ParameterSet<f64> = init_parameters(&cfg, &mut generator(4)).unwrap();
        let (_, maps) = encode_with_attention(&params, &cfg, &tokens(4, 6, (2, 2))).unwrap();
        assert_eq!(maps.len(), 2);
        for map in maps {
            assert_eq!(map.len(), 2 * 4 * 4);
            for row in map.chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = toy();
        let params: ParameterSet<f64> = init_parameters(&cfg, &mut generator(5)).unwrap();
        let seq = tokens(6, 6, (2, 3));
        let out = encode(&params, &cfg, &seq).unwrap();
        let perm = [4, 0, 5, 2, 1, 3];
        let mut data = Vec::new();
        for &p in &perm {
            data.extend_from_slice(seq.token(p));
        }
        let permuted = TokenSequence::new(
            Tensor::from_vec(&[6, 6], data).unwrap(),
            perm.iter().map(|&p| seq.positions[p]).collect(),
            seq.grid,
        )
        .unwrap();
        let out_p = encode(&params, &cfg, &permuted).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in out_p.token(i).iter().zip(out.token(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_constant_and_quadratic() {
        let cfg = toy();
        let params: ParameterSet<f64> = init_parameters(&cfg, &mut generator(6)).unwrap();
        let (_, g) = gradients(&params, |tape, _| tape.constant_owned(1, 1, vec![3.0])).unwrap();
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));

        let target = "blocks.1.mlp.fc1.weight";
        let (_, g) = gradients(&params, |tape, b| Ok(tape.sum_squares(b.get(target)?))).unwrap();
        for (name, t) in g.iter() {
            if name == target {
                let p = params.get(name).unwrap();
                assert!(t.data().iter().zip(p.data()).all(|(g, p)| *g == 2.0 * p));
            } else {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let cfg = toy();
        let params: ParameterSet<f64> = init_parameters(&cfg, &mut generator(6)).unwrap();
        let err = gradients(&params, |tape, _| tape.constant_owned(1, 1, vec![f64::NAN])).unwrap_err();
        assert_eq!(err, Error::NonFiniteLoss(Stage::Loss));
    }

    #[test]
    fn encoder_matches_finite_differences() {
        let cfg = toy();
        let mut params: ParameterSet<f64> = init_parameters(&cfg, &mut generator(7)).unwrap();
        // Larger weights so that every block contributes non-trivially.
        for (_, t) in params.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.3 * libm::sin(i as f64 * 1.3 + 0.4);
            }
        }
        let seq = tokens(5, 6, (2, 3));
        let loss = |p: &ParameterSet<f64>| {
            let out = encode(p, &cfg, &seq).unwrap();
            out.tokens.data().iter().enumerate().map(|(i, v)| v * libm::cos(i as f64)).sum::<f64>()
        };
        let (_, g) = gradients(&params, |tape, b| {
            let x = tape.constant(&seq.tokens);
            let (out, _) = encode_on_tape(tape, b, &cfg, x, &seq.positions)?;
            let (r, c) = tape.shape(out);
            let w = tape.constant_owned(r, c, (0..r * c).map(|i| libm::cos(i as f64)).collect())?;
            // Σ out ⊙ w  =  (‖out + w‖² − ‖out − w‖²) / 4
            let plus = tape.add(out, w)?;
            let minus = tape.sub(out, w)?;
            let (sp, sm) = (tape.sum_squares(plus), tape.sum_squares(minus));
            let d = tape.sub(sp, sm)?;
            Ok(tape.scale(d, 0.25))
        })
        .unwrap();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            for e in 0..params.get(&name).unwrap().len() {
                let orig = params.get(&name).unwrap().data()[e];
                params.get_mut(&name).unwrap().data_mut()[e] = orig + 1e-5;
                let up = loss(&params);
                params.get_mut(&name).unwrap().data_mut()[e] = orig - 1e-5;
                let down = loss(&params);
                params.get_mut(&name).unwrap().data_mut()[e] = orig;
                let numeric = (up - down) / 2e-5;
                let analytic = g.get(&name).unwrap().data()[e];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{e}]: {analytic} vs {numeric}");
            }
        }
    }
}
