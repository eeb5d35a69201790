//! Toy pre-norm transformer blocks and synthetic calibration data.
//!
//! Every forward pass runs on a [`Tape`]; quantization is injected per linear
//! layer through [`LinearQuant`], so the full-precision and quantized paths
//! share one implementation.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, QueptError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYERS_PER_BLOCK: usize = 4;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Qkv,
    AttnOut,
    MlpUp,
    MlpDown,
}

impl LayerKind {
    pub const ALL: [LayerKind; LAYERS_PER_BLOCK] = [Self::Qkv, Self::AttnOut, Self::MlpUp, Self::MlpDown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Qkv => "qkv",
            Self::AttnOut => "attn_out",
            Self::MlpUp => "mlp_up",
            Self::MlpDown => "mlp_down",
        }
    }
}

/// A quantizable linear layer: `(block, kind)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerRef {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerRef {
    pub fn from_index(index: usize) -> Self {
        Self {
            block: index / LAYERS_PER_BLOCK,
            kind: LayerKind::ALL[index % LAYERS_PER_BLOCK],
        }
    }

    pub fn index(self) -> usize {
        self.block * LAYERS_PER_BLOCK + self.kind.index()
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden: 64,
            heads: 4,
            tokens: 16,
            mlp_ratio: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.heads == 0 || self.tokens == 0 || self.mlp_ratio == 0 {
            return arg_err(format!("model dims must be positive: {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return arg_err(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.blocks * LAYERS_PER_BLOCK
    }

    /// `(out, in)` of a layer's weight.
    pub fn weight_shape(&self, kind: LayerKind) -> (usize, usize) {
        let (d, f) = (self.hidden, self.hidden * self.mlp_ratio);
        match kind {
            LayerKind::Qkv => (3 * d, d),
            LayerKind::AttnOut => (d, d),
            LayerKind::MlpUp => (f, d),
            LayerKind::MlpDown => (d, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out × in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBlock<T> {
    pub linears: [Linear<T>; LAYERS_PER_BLOCK],
}

impl<T: Scalar> ToyBlock<T> {
    pub fn linear(&self, kind: LayerKind) -> &Linear<T> {
        &self.linears[kind.index()]
    }
}

/// Per-layer hooks that turn a full-precision linear layer into a quantized one.
pub trait LinearQuant<T: Scalar> {
    /// Effective weight used by `layer`, given the frozen weight `w`.
    fn weight(&self, tape: &mut Tape<T>, layer: LayerRef, w: Var) -> Result<Var>;
    /// Effective input fed to `layer`.
    fn input(&self, tape: &mut Tape<T>, layer: LayerRef, x: Var) -> Result<Var>;
}

/// Pass-through quantization.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullPrecision;

impl<T: Scalar> LinearQuant<T> for FullPrecision {
    fn weight(&self, _: &mut Tape<T>, _: LayerRef, w: Var) -> Result<Var> {
        Ok(w)
    }
    fn input(&self, _: &mut Tape<T>, _: LayerRef, x: Var) -> Result<Var> {
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub dims: ModelDims,
    pub blocks: Vec<ToyBlock<T>>,
}

fn linear_taped<T: Scalar>(
    tape: &mut Tape<T>,
    lin: &Linear<T>,
    layer: LayerRef,
    x: Var,
    quant: &dyn LinearQuant<T>,
) -> Result<Var> {
    let w = tape.constant(lin.weight.clone());
    let w = quant.weight(tape, layer, w)?;
    let x = quant.input(tape, layer, x)?;
    let y = tape.matmul_t(x, w)?;
    let b = tape.constant(lin.bias.clone());
    tape.add_row_bias(y, b)
}

impl<T: Scalar> ToyModel<T> {
    /// Seeded random model. Weights `~ N(0, 1/fan_in)`, small biases.
    pub fn generate(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..dims.blocks)
            .map(|_| {
                let linears = LayerKind::ALL.map(|kind| {
                    let (out, inp) = dims.weight_shape(kind);
                    let std = T::lit(1.0 / (inp as f64).sqrt());
                    Linear {
                        weight: Tensor::randn(&[out, inp], std, &mut rng),
                        bias: Tensor::randn(&[out], T::lit(0.02), &mut rng),
                    }
                });
                ToyBlock { linears }
            })
            .collect();
        Ok(Self { dims, blocks })
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.dims.tokens || s[2] != self.dims.hidden {
            return Err(QueptError::Dimension {
                op: "forward",
                lhs: s.to_vec(),
                rhs: vec![0, self.dims.tokens, self.dims.hidden],
            });
        }
        Ok(s[0])
    }

    /// Records block `index` on `tape` for a stacked `[n·t × d]` input.
    pub fn block_taped(&self, tape: &mut Tape<T>, index: usize, x: Var, quant: &dyn LinearQuant<T>) -> Result<Var> {
        let block = &self.blocks[index];
        let (d, t, heads) = (self.dims.hidden, self.dims.tokens, self.dims.heads);
        let dh = d / heads;
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != d || !rows.is_multiple_of(t) {
            return Err(QueptError::Dimension {
                op: "block",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![t, d],
            });
        }
        let at = |kind| LayerRef { block: index, kind };
        let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();

        let h = tape.layer_norm(x, T::lit(NORM_EPS));
        let qkv = linear_taped(tape, block.linear(LayerKind::Qkv), at(LayerKind::Qkv), h, quant)?;
        let mut seqs = Vec::with_capacity(rows / t);
        for s in 0..rows / t {
            let rows_s = tape.slice_rows(qkv, s * t, (s + 1) * t)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.slice_cols(rows_s, hd * dh, (hd + 1) * dh)?;
                let k = tape.slice_cols(rows_s, d + hd * dh, d + (hd + 1) * dh)?;
                let v = tape.slice_cols(rows_s, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
                let scores = tape.matmul_t(q, k)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax_rows(scores);
                head_out.push(tape.matmul(probs, v)?);
            }
            seqs.push(tape.concat_cols(&head_out)?);
        }
        let attn = tape.concat_rows(&seqs)?;
        let attn = linear_taped(tape, block.linear(LayerKind::AttnOut), at(LayerKind::AttnOut), attn, quant)?;
        let x1 = tape.add(x, attn)?;

        let h2 = tape.layer_norm(x1, T::lit(NORM_EPS));
        let up = linear_taped(tape, block.linear(LayerKind::MlpUp), at(LayerKind::MlpUp), h2, quant)?;
        let up = tape.gelu(up);
        let down = linear_taped(tape, block.linear(LayerKind::MlpDown), at(LayerKind::MlpDown), up, quant)?;
        tape.add(x1, down)
    }

    fn to_rows(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        x.reshape(&[n * self.dims.tokens, self.dims.hidden])
    }

    /// One block on a `(batch, t, d)` input.
    pub fn forward_block(&self, index: usize, x: &Tensor<T>, quant: &dyn LinearQuant<T>) -> Result<Tensor<T>> {
        if index >= self.blocks.len() {
            return arg_err(format!("block {index} out of range"));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(self.to_rows(x)?);
        let y = self.block_taped(&mut tape, index, xv, quant)?;
        tape.value(y).reshape(x.shape())
    }

    pub fn forward_block_fp(&self, index: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_block(index, x, &FullPrecision)
    }

    /// All blocks in order.
    pub fn forward(&self, x: &Tensor<T>, quant: &dyn LinearQuant<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for i in 0..self.blocks.len() {
            cur = self.forward_block(i, &cur, quant)?;
        }
        Ok(cur)
    }

    pub fn forward_fp(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, &FullPrecision)
    }

    /// Zeroes every weight and bias.
    pub fn zeroed(&self) -> Self {
        let mut m = self.clone();
        for b in &mut m.blocks {
            for l in &mut b.linears {
                l.weight = Tensor::zeros(l.weight.shape());
                l.bias = Tensor::zeros(l.bias.shape());
            }
        }
        m
    }
}

/// Synthetic calibration sequences `[n × t × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibSet<T> {
    pub seed: u64,
    pub data: Tensor<T>,
}

/// Rank of the shared structure term in [`gen_calib`].
const CALIB_STRUCTURE_RANK: usize = 4;

/// Standard-normal features plus a per-sequence low-rank term `C_s · U`,
/// where `U` is shared across sequences and `C_s` is drawn per sequence.
pub fn gen_calib<T: Scalar>(seed: u64, n: usize, t: usize, d: usize) -> Result<CalibSet<T>> {
    if n == 0 || t == 0 || d == 0 {
        return arg_err(format!("calibration sizes must be positive (n={n}, t={t}, d={d})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CALIB_STRUCTURE_RANK.min(d);
    let basis = Tensor::<T>::randn(&[k, d], T::lit(1.0 / (k as f64).sqrt()), &mut rng);
    let mut data = Vec::with_capacity(n * t * d);
    for _ in 0..n {
        let noise = Tensor::<T>::randn(&[t, d], T::one(), &mut rng);
        let coef = Tensor::<T>::randn(&[t, k], T::one(), &mut rng);
        let seq = noise.add(&coef.matmul(&basis)?)?;
        data.extend(seq.into_data());
    }
    Ok(CalibSet {
        seed,
        data: Tensor::new(vec![n, t, d], data)?,
    })
}

impl<T: Scalar> CalibSet<T> {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks the chosen sequences into `(indices.len(), t, d)`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        gather(&self.data, indices)
    }
}

/// Gathers leading-axis entries of `x`.
pub fn gather<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if indices.is_empty() {
        return arg_err("empty gather");
    }
    let per = x.cols();
    let mut data = Vec::with_capacity(per * indices.len());
    for &i in indices {
        if i >= x.shape()[0] {
            return arg_err(format!("index {i} out of range"));
        }
        data.extend_from_slice(x.row(i));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            blocks: 2,
            hidden: 8,
            heads: 2,
            tokens: 4,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let m = ToyModel::<f32>::generate(small_dims(), 1).unwrap().zeroed();
        let x = gen_calib::<f32>(3, 2, 4, 8).unwrap().data;
        assert_eq!(m.forward_fp(&x).unwrap(), x);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let m = ToyModel::<f32>::generate(small_dims(), 1).unwrap();
        let c = gen_calib::<f32>(3, 3, 4, 8).unwrap();
        let y = m.forward_fp(&c.data).unwrap();
        let perm = [2, 0, 1];
        let yp = m.forward_fp(&c.batch(&perm).unwrap()).unwrap();
        assert_eq!(gather(&y, &perm).unwrap(), yp);
    }

    #[test]
    fn composition_folds_blocks() {
        let m = ToyModel::<f32>::generate(small_dims(), 4).unwrap();
        let x = gen_calib::<f32>(3, 2, 4, 8).unwrap().data;
        let folded = (0..2).try_fold(x.clone(), |acc, i| m.forward_block_fp(i, &acc)).unwrap();
        assert_eq!(folded, m.forward_fp(&x).unwrap());
    }

    #[test]
    fn shape_errors() {
        let m = ToyModel::<f32>::generate(small_dims(), 1).unwrap();
        assert!(m.forward_fp(&Tensor::zeros(&[2, 4, 7])).is_err());
        assert!(m.forward_fp(&Tensor::zeros(&[8, 8])).is_err());
        let bad = ModelDims { heads: 3, ..small_dims() };
        assert!(ToyModel::<f32>::generate(bad, 0).is_err());
    }

    #[test]
    fn calib_generation() {
        let a = gen_calib::<f32>(9, 4, 4, 8).unwrap();
        assert_eq!(a, gen_calib::<f32>(9, 4, 4, 8).unwrap());
        assert_ne!(a, gen_calib::<f32>(10, 4, 4, 8).unwrap());
        assert!(gen_calib::<f32>(9, 0, 4, 8).is_err());
        let big = gen_calib::<f32>(0, 40, 16, 16).unwrap();
        assert!(big.data.numel() >= 10_000);
        let mean: f32 = big.data.data()[..10_000].iter().sum::<f32>() / 10_000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn layer_ref_indexing() {
        let l = LayerRef::from_index(6);
        assert_eq!(l, LayerRef { block: 1, kind: LayerKind::MlpUp });
        assert_eq!(l.index(), 6);
        assert_eq!(l.to_string(), "block1.mlp_up");
    }
}
