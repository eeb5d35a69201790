//! Block-wise multi-bit reconstruction.
//!
//! Each calibration step samples one bit-width per tier, builds the block's
//! quantized-path input by merging the previous block's outputs at those
//! bit-widths, and then, for `b_H`, `b_M`, `b_L` in turn, reconstructs the
//! full-precision block output and takes one optimizer step on the adapter
//! slice and clip pair that `b` reaches.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{CascadedAdapter, RankPartition, SharingMode, Tier};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{arg_err, QueptError, Result};
use crate::merge::{merge_batch, MergePolicy};
use crate::model::{gather, CalibSet, LayerKind, LayerRef, LinearQuant, ToyModel, LAYERS_PER_BLOCK};
use crate::optim::{Adam, Region, Update};
use crate::quantizer::{abs_quantile, act_scale_from_quantile, fake_quant_weight, BitWidth, DEFAULT_ACT_PERCENTILE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound kept on learnable clip multipliers.
pub const CLIP_FLOOR: f64 = 1e-3;

/// Sequences per forward chunk when sweeping a whole calibration set.
const SWEEP_CHUNK: usize = 32;

/// Target bit set split into low, mid and high tiers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierPartition {
    low: Vec<BitWidth>,
    mid: Vec<BitWidth>,
    high: Vec<BitWidth>,
}

impl TierPartition {
    pub fn new(mut low: Vec<BitWidth>, mut mid: Vec<BitWidth>, mut high: Vec<BitWidth>) -> Result<Self> {
        for t in [&mut low, &mut mid, &mut high] {
            t.sort_unstable();
            t.dedup();
            if t.is_empty() {
                return arg_err("every tier needs at least one bit-width");
            }
        }
        if !(low.last() < mid.first() && mid.last() < high.first()) {
            return arg_err(format!(
                "tiers must be ordered low < mid < high: {low:?} / {mid:?} / {high:?}"
            ));
        }
        Ok(Self { low, mid, high })
    }

    /// `{4} / {5,6} / {7,8}`.
    pub fn weight_activation_default() -> Self {
        let b = |v: &[u32]| v.iter().map(|&x| BitWidth::new(x).unwrap()).collect();
        Self::new(b(&[4]), b(&[5, 6]), b(&[7, 8])).unwrap()
    }

    /// `{2,3} / {4,5} / {6,7,8}`, used for weight-only runs.
    pub fn weight_only_default() -> Self {
        let b = |v: &[u32]| v.iter().map(|&x| BitWidth::new(x).unwrap()).collect();
        Self::new(b(&[2, 3]), b(&[4, 5]), b(&[6, 7, 8])).unwrap()
    }

    pub fn tier(&self, tier: Tier) -> &[BitWidth] {
        match tier {
            Tier::Low => &self.low,
            Tier::Mid => &self.mid,
            Tier::High => &self.high,
        }
    }

    /// Sorted union of all tiers.
    pub fn bits(&self) -> Vec<BitWidth> {
        let mut v: Vec<_> = self.low.iter().chain(&self.mid).chain(&self.high).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn tier_of(&self, b: BitWidth) -> Option<Tier> {
        Tier::ALL.into_iter().find(|&t| self.tier(t).contains(&b))
    }

    pub fn contains(&self, b: BitWidth) -> bool {
        self.tier_of(b).is_some()
    }

    pub fn min_bit(&self) -> BitWidth {
        self.low[0]
    }

    pub fn max_bit(&self) -> BitWidth {
        *self.high.last().unwrap()
    }
}

impl FromStr for TierPartition {
    type Err = QueptError;

    /// Parses `4/5,6/7,8`.
    fn from_str(s: &str) -> Result<Self> {
        let tiers: Vec<Vec<BitWidth>> = s
            .split('/')
            .map(|t| {
                t.split(',')
                    .map(|b| {
                        b.trim()
                            .parse::<u32>()
                            .map_err(|e| QueptError::Argument(format!("tier partition `{s}`: {e}")))
                            .and_then(BitWidth::new)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        match <[Vec<BitWidth>; 3]>::try_from(tiers) {
            Ok([l, m, h]) => Self::new(l, m, h),
            Err(_) => arg_err(format!("tier partition `{s}` needs exactly three groups")),
        }
    }
}

impl fmt::Display for TierPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[BitWidth]| v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        write!(f, "{}/{}/{}", join(&self.low), join(&self.mid), join(&self.high))
    }
}

/// One bit-width per tier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledBits {
    pub low: BitWidth,
    pub mid: BitWidth,
    pub high: BitWidth,
}

impl SampledBits {
    /// High, mid, low: the per-step optimization order.
    pub fn descending(&self) -> [(Tier, BitWidth); 3] {
        [(Tier::High, self.high), (Tier::Mid, self.mid), (Tier::Low, self.low)]
    }
}

pub fn sample_bits<R: Rng + ?Sized>(partition: &TierPartition, rng: &mut R) -> SampledBits {
    let mut pick = |t: Tier| {
        let v = partition.tier(t);
        v[rng.gen_range(0..v.len())]
    };
    SampledBits {
        low: pick(Tier::Low),
        mid: pick(Tier::Mid),
        high: pick(Tier::High),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mae,
    Mse,
}

impl FromStr for LossKind {
    type Err = QueptError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mae" => Ok(Self::Mae),
            "mse" => Ok(Self::Mse),
            other => arg_err(format!("unknown loss `{other}`")),
        }
    }
}

/// Quantizer layout fixed before calibration starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSetup {
    pub partition: TierPartition,
    pub ranks: RankPartition,
    pub sharing: SharingMode,
    pub quantize_activations: bool,
    pub act_percentile: f64,
}

impl Default for QuantSetup {
    fn default() -> Self {
        Self {
            partition: TierPartition::weight_activation_default(),
            ranks: RankPartition::new(4, 4, 4).unwrap(),
            sharing: SharingMode::Cascaded,
            quantize_activations: true,
            act_percentile: DEFAULT_ACT_PERCENTILE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub steps: usize,
    pub lr_adapter: f64,
    pub lr_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` feeds every block its full-precision input.
    pub merge: Option<MergePolicy>,
    pub loss: LossKind,
    pub learn_clips: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr_adapter: 1e-3,
            lr_clip: 1e-4,
            batch_size: 8,
            seed: 0,
            merge: Some(MergePolicy::default()),
            loss: LossKind::Mae,
            learn_clips: true,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return arg_err("steps and batch size must be positive");
        }
        if !(self.lr_adapter >= 0.0 && self.lr_clip >= 0.0) {
            return arg_err("learning rates must be non-negative");
        }
        Ok(())
    }
}

/// Trainable state of one quantized linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub adapter: CascadedAdapter,
    /// `(alpha, beta)` per bit-width.
    pub clips: BTreeMap<BitWidth, (ParamId, ParamId)>,
    /// Frozen activation scale per bit-width.
    pub act_scales: BTreeMap<BitWidth, T>,
}

/// Frozen model plus adapters, clips and activation scales for every bit in B.
#[derive(Clone, Debug)]
pub struct CalibratedModel<T> {
    pub model: ToyModel<T>,
    pub setup: QuantSetup,
    pub store: ParamStore<T>,
    pub layers: Vec<LayerState<T>>,
    optimizer_steps: u64,
}

/// Weight and activation bit-widths of one layer; `None` is full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerBits {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<BitWidth>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act: Option<BitWidth>,
}

/// One progress record per calibration step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub block: usize,
    pub step: usize,
    pub b_l: u32,
    pub b_m: u32,
    pub b_h: u32,
    pub loss_l: f64,
    pub loss_m: f64,
    pub loss_h: f64,
}

pub(crate) fn clip_names(layer: LayerRef, b: BitWidth) -> (String, String) {
    (format!("{layer}.clip.w{b}.alpha"), format!("{layer}.clip.w{b}.beta"))
}

/// Captures every linear-layer input seen during a forward pass.
struct InputRecorder<T> {
    seen: RefCell<BTreeMap<usize, Vec<Tensor<T>>>>,
}

impl<T: Scalar> LinearQuant<T> for InputRecorder<T> {
    fn weight(&self, _: &mut Tape<T>, _: LayerRef, w: Var) -> Result<Var> {
        Ok(w)
    }
    fn input(&self, tape: &mut Tape<T>, layer: LayerRef, x: Var) -> Result<Var> {
        self.seen
            .borrow_mut()
            .entry(layer.index())
            .or_default()
            .push(tape.value(x).clone());
        Ok(x)
    }
}

/// Applies the calibrated quantizers of a [`CalibratedModel`] under a
/// per-layer bit assignment.
pub struct StoreQuant<'a, T> {
    cal: &'a CalibratedModel<T>,
    bits: &'a [LayerBits],
}

impl<'a, T: Scalar> StoreQuant<'a, T> {
    pub fn new(cal: &'a CalibratedModel<T>, bits: &'a [LayerBits]) -> Result<Self> {
        if bits.len() != cal.layers.len() {
            return arg_err(format!("{} layer bit entries for {} layers", bits.len(), cal.layers.len()));
        }
        Ok(Self { cal, bits })
    }
}

impl<T: Scalar> LinearQuant<T> for StoreQuant<'_, T> {
    fn weight(&self, tape: &mut Tape<T>, layer: LayerRef, w: Var) -> Result<Var> {
        let Some(b) = self.bits[layer.index()].weight else {
            return Ok(w);
        };
        let state = &self.cal.layers[layer.index()];
        let tier = self.cal.tier_for(layer, b)?;
        let (alpha_id, beta_id) = state.clips[&b];
        let r = state.adapter.compensation(tape, &self.cal.store, tier)?;
        let alpha = tape.param(&self.cal.store, alpha_id);
        let beta = tape.param(&self.cal.store, beta_id);
        fake_quant_weight(tape, w, r, alpha, beta, b)
    }

    fn input(&self, tape: &mut Tape<T>, layer: LayerRef, x: Var) -> Result<Var> {
        let Some(b) = self.bits[layer.index()].act else {
            return Ok(x);
        };
        let scale = *self.cal.layers[layer.index()]
            .act_scales
            .get(&b)
            .ok_or_else(|| QueptError::UnsupportedBit {
                layer: layer.to_string(),
                bit: b.bits(),
            })?;
        tape.fake_quant_act(x, scale, T::lit(b.qmin() as f64), T::lit(b.qmax() as f64))
    }
}

/// Runs `f` over `x` in chunks of whole sequences and restacks the results.
pub(crate) fn sweep<T: Scalar>(x: &Tensor<T>, mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(x.numel());
    for start in (0..n).step_by(SWEEP_CHUNK) {
        let end = (start + SWEEP_CHUNK).min(n);
        data.extend(f(&x.slice_rows(start, end)?)?.into_data());
    }
    Tensor::new(x.shape().to_vec(), data)
}

impl<T: Scalar> CalibratedModel<T> {
    /// Zero-start state: `B = 0`, `alpha = beta = 1`, activation scales from
    /// the full-precision activations of `calib`.
    pub fn init(model: ToyModel<T>, calib: &CalibSet<T>, setup: QuantSetup, seed: u64) -> Result<Self> {
        if calib.is_empty() {
            return arg_err("empty calibration set");
        }
        model.check_input(&calib.data)?;
        let bits = setup.partition.bits();
        if bits.len() < 3 {
            return arg_err("the target bit set needs at least three bit-widths");
        }
        let recorder = InputRecorder {
            seen: RefCell::new(BTreeMap::new()),
        };
        sweep(&calib.data, |chunk| model.forward(chunk, &recorder))?;
        let seen = recorder.seen.into_inner();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ada9);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(model.dims.layer_count());
        for index in 0..model.dims.layer_count() {
            let layer = LayerRef::from_index(index);
            let shape = model.dims.weight_shape(layer.kind);
            let adapter = CascadedAdapter::new(&mut store, &layer.to_string(), shape, setup.ranks, setup.sharing, &mut rng)?;
            let mut clips = BTreeMap::new();
            for &b in &bits {
                let (an, bn) = clip_names(layer, b);
                let a = store.insert(an, Tensor::scalar(T::one()), true)?;
                let bb = store.insert(bn, Tensor::scalar(T::one()), true)?;
                clips.insert(b, (a, bb));
            }
            let q = abs_quantile(&seen[&index], setup.act_percentile)?;
            let act_scales = bits.iter().map(|&b| (b, act_scale_from_quantile(q, b).scale)).collect();
            layers.push(LayerState {
                adapter,
                clips,
                act_scales,
            });
        }
        Ok(Self {
            model,
            setup,
            store,
            layers,
            optimizer_steps: 0,
        })
    }

    /// Rebuilds a calibrated model from already-populated parts.
    pub fn from_parts(
        model: ToyModel<T>,
        setup: QuantSetup,
        store: ParamStore<T>,
        layers: Vec<LayerState<T>>,
    ) -> Result<Self> {
        if layers.len() != model.dims.layer_count() {
            return arg_err("layer state count does not match model");
        }
        Ok(Self {
            model,
            setup,
            store,
            layers,
            optimizer_steps: 0,
        })
    }

    /// Optimizer steps applied to this model since construction.
    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer_steps
    }

    pub fn bits(&self) -> Vec<BitWidth> {
        self.setup.partition.bits()
    }

    pub(crate) fn tier_for(&self, layer: LayerRef, b: BitWidth) -> Result<Tier> {
        self.setup.partition.tier_of(b).ok_or(QueptError::UnsupportedBit {
            layer: layer.to_string(),
            bit: b.bits(),
        })
    }

    /// Bit assignment quantizing every layer at `b` (activations too, when
    /// the setup quantizes them).
    pub fn uniform_bits(&self, b: BitWidth) -> Vec<LayerBits> {
        let act = self.setup.quantize_activations.then_some(b);
        vec![LayerBits { weight: Some(b), act }; self.layers.len()]
    }

    fn block_bits(&self, block: usize, b: BitWidth) -> Vec<LayerBits> {
        let mut bits = vec![LayerBits::default(); self.layers.len()];
        let act = self.setup.quantize_activations.then_some(b);
        for k in 0..LAYERS_PER_BLOCK {
            bits[block * LAYERS_PER_BLOCK + k] = LayerBits { weight: Some(b), act };
        }
        bits
    }

    /// Whole-model forward under a per-layer bit assignment.
    pub fn forward(&self, x: &Tensor<T>, bits: &[LayerBits]) -> Result<Tensor<T>> {
        let q = StoreQuant::new(self, bits)?;
        sweep(x, |chunk| self.model.forward(chunk, &q))
    }

    /// Block `index` quantized at `b` on a `(n, t, d)` input.
    pub fn forward_block(&self, index: usize, x: &Tensor<T>, b: BitWidth) -> Result<Tensor<T>> {
        let bits = self.block_bits(index, b);
        let q = StoreQuant::new(self, &bits)?;
        sweep(x, |chunk| self.model.forward_block(index, chunk, &q))
    }

    /// One multi-bit reconstruction step on block `block`.
    ///
    /// Returns the losses in `(low, mid, high)` order.
    pub fn block_step(
        &mut self,
        block: usize,
        x_fp: &Tensor<T>,
        x_merged: &Tensor<T>,
        bits: SampledBits,
        config: &CalibConfig,
        adam: &mut Adam<T>,
    ) -> Result<[T; 3]> {
        let target = self.model.forward_block_fp(block, x_fp)?;
        self.block_step_with_target(block, &target, x_merged, bits, config, adam)
    }

    fn block_step_with_target(
        &mut self,
        block: usize,
        target: &Tensor<T>,
        x_merged: &Tensor<T>,
        bits: SampledBits,
        config: &CalibConfig,
        adam: &mut Adam<T>,
    ) -> Result<[T; 3]> {
        let (d, t) = (self.model.dims.hidden, self.model.dims.tokens);
        let n = self.model.check_input(x_merged)?;
        target.same_shape(x_merged, "block_step")?;
        let mut losses = [T::zero(); 3];
        for (tier, b) in bits.descending() {
            let layer0 = LayerRef { block, kind: LayerKind::Qkv };
            if self.setup.partition.tier_of(b) != Some(tier) {
                return Err(QueptError::UnsupportedBit {
                    layer: layer0.to_string(),
                    bit: b.bits(),
                });
            }
            let layer_bits = self.block_bits(block, b);
            let mut tape = Tape::new();
            let loss = {
                let q = StoreQuant::new(self, &layer_bits)?;
                let x = tape.constant(x_merged.reshape(&[n * t, d])?);
                let y = self.model.block_taped(&mut tape, block, x, &q)?;
                let target = tape.constant(target.reshape(&[n * t, d])?);
                match config.loss {
                    LossKind::Mae => tape.mae(y, target)?,
                    LossKind::Mse => tape.mse(y, target)?,
                }
            };
            losses[2 - tier.index()] = tape.value(loss).item();
            self.store.zero_grad();
            tape.backward(loss, &mut self.store)?;

            let mut updates = Vec::new();
            for kind in LayerKind::ALL {
                let state = &self.layers[LayerRef { block, kind }.index()];
                let (factor, rank) = state.adapter.route(tier);
                let lr = T::lit(config.lr_adapter);
                updates.push(Update { id: factor.a, lr, region: Region::LeadingRows(rank), floor: None });
                updates.push(Update { id: factor.b, lr, region: Region::LeadingCols(rank), floor: None });
                if config.learn_clips {
                    let (a, bb) = state.clips[&b];
                    let lr = T::lit(config.lr_clip);
                    let floor = Some(T::lit(CLIP_FLOOR));
                    updates.push(Update { id: a, lr, region: Region::All, floor });
                    updates.push(Update { id: bb, lr, region: Region::All, floor });
                }
            }
            adam.step(&mut self.store, &updates);
            self.optimizer_steps += 1;
        }
        self.store.zero_grad();
        Ok(losses)
    }

    /// Next block's quantized-path input: the merge of block `block`'s outputs
    /// at three sampled bit-widths.
    fn merged_outputs<R: Rng + ?Sized>(
        &self,
        block: usize,
        x_q: &Tensor<T>,
        bits: SampledBits,
        policy: &MergePolicy,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let (n, t, d) = (x_q.shape()[0], self.model.dims.tokens, self.model.dims.hidden);
        let flat = |b| -> Result<Tensor<T>> { self.forward_block(block, x_q, b)?.reshape(&[n * t, d]) };
        let (l, m, h) = (flat(bits.low)?, flat(bits.mid)?, flat(bits.high)?);
        merge_batch(&l, &m, &h, t, policy, rng)?.reshape(&[n, t, d])
    }

    /// Block-wise calibration over `calib`. Calls `on_step` once per step.
    pub fn calibrate(
        &mut self,
        calib: &CalibSet<T>,
        config: &CalibConfig,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        config.validate()?;
        if calib.is_empty() {
            return arg_err("empty calibration set");
        }
        let n = self.model.check_input(&calib.data)?;
        let blocks = self.model.blocks.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut fp_in = vec![calib.data.clone()];
        for i in 0..blocks {
            let next = sweep(&fp_in[i], |c| self.model.forward_block_fp(i, c))?;
            fp_in.push(next);
        }
        // quantized-path input of the previous block
        let mut q_prev: Option<Tensor<T>> = None;
        let mut q_cur = calib.data.clone();

        for block in 0..blocks {
            let mut adam = Adam::new();
            for step in 0..config.steps {
                let bits = sample_bits(&self.setup.partition, &mut rng);
                let idx = sample(&mut rng, n, config.batch_size.min(n)).into_vec();
                let target = gather(&fp_in[block + 1], &idx)?;
                let x_merged = match (&config.merge, &q_prev) {
                    (Some(policy), Some(prev)) => {
                        self.merged_outputs(block - 1, &gather(prev, &idx)?, bits, policy, &mut rng)?
                    }
                    (Some(_), None) => gather(&q_cur, &idx)?,
                    (None, _) => gather(&fp_in[block], &idx)?,
                };
                let [ll, lm, lh] = self.block_step_with_target(block, &target, &x_merged, bits, config, &mut adam)?;
                on_step(&StepRecord {
                    block,
                    step,
                    b_l: bits.low.bits(),
                    b_m: bits.mid.bits(),
                    b_h: bits.high.bits(),
                    loss_l: ll.to_f64_lossy(),
                    loss_m: lm.to_f64_lossy(),
                    loss_h: lh.to_f64_lossy(),
                });
            }
            if block + 1 < blocks {
                if let Some(policy) = &config.merge {
                    let mut parts = Vec::with_capacity(q_cur.numel());
                    for start in (0..n).step_by(config.batch_size) {
                        let end = (start + config.batch_size).min(n);
                        let bits = sample_bits(&self.setup.partition, &mut rng);
                        let chunk = q_cur.slice_rows(start, end)?;
                        parts.extend(self.merged_outputs(block, &chunk, bits, policy, &mut rng)?.into_data());
                    }
                    let next = Tensor::new(q_cur.shape().to_vec(), parts)?;
                    q_prev = Some(std::mem::replace(&mut q_cur, next));
                }
            }
        }
        Ok(())
    }
}

/// Initializes quantization state and runs block-wise calibration.
pub fn calibrate_model<T: Scalar>(
    model: ToyModel<T>,
    calib: &CalibSet<T>,
    setup: QuantSetup,
    config: &CalibConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<CalibratedModel<T>> {
    let mut cal = CalibratedModel::init(model, calib, setup, config.seed)?;
    cal.calibrate(calib, config, on_step)?;
    Ok(cal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bw(v: u32) -> BitWidth {
        BitWidth::new(v).unwrap()
    }

    #[test]
    fn partition_parsing_and_ordering() {
        let p: TierPartition = "4/5,6/7,8".parse().unwrap();
        assert_eq!(p, TierPartition::weight_activation_default());
        assert_eq!(p.to_string(), "4/5,6/7,8");
        assert_eq!(p.bits(), BitWidth::range(4, 8).unwrap());
        assert_eq!(p.tier_of(bw(6)), Some(Tier::Mid));
        assert_eq!(p.tier_of(bw(3)), None);
        assert!("5/4/8".parse::<TierPartition>().is_err());
        assert!("4/5".parse::<TierPartition>().is_err());
        assert!("4/4,5/8".parse::<TierPartition>().is_err());
        assert!("4//8".parse::<TierPartition>().is_err());
    }

    #[test]
    fn singleton_tiers_always_sampled() {
        let p: TierPartition = "4/6/8".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(
                sample_bits(&p, &mut rng),
                SampledBits { low: bw(4), mid: bw(6), high: bw(8) }
            );
        }
    }

    #[test]
    fn sampled_bits_are_ordered_and_balanced() {
        let p = TierPartition::weight_activation_default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut five, mut seven) = (0usize, 0usize);
        for _ in 0..10_000 {
            let s = sample_bits(&p, &mut rng);
            assert!(s.low < s.mid && s.mid < s.high);
            five += (s.mid == bw(5)) as usize;
            seven += (s.high == bw(7)) as usize;
        }
        for c in [five, seven] {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn loss_parsing() {
        assert_eq!("MAE".parse::<LossKind>().unwrap(), LossKind::Mae);
        assert!("huber".parse::<LossKind>().is_err());
    }
}
