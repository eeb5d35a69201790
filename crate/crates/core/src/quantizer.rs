//! Uniform fake quantization.
//!
//! Weights use an asymmetric quantizer whose range is set by learnable
//! multipliers on the max and min of the compensated weight `W + R`:
//!
//! ```text
//! s = (α·max(W+R) − β·min(W+R)) / 2^(b−1)
//! z = −round(β·min(W+R) / s)
//! Ŵ = s · (clip(round((W+R)/s) + z, −2^(b−1), 2^(b−1)−1) − z)
//! ```
//!
//! The `2^(b−1)` denominator spans only half of the signed code range, so
//! the top of the weight range saturates unless α shrinks. Activations use a
//! symmetric quantizer with a frozen scale and no zero-point.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, QueptError, Result};
use crate::scalar::Scalar;
use crate::tensor::{quantile, Tensor};

/// Floor applied to degenerate weight and activation scales.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Default quantile of `|x|` used to initialize activation scales.
pub const DEFAULT_ACT_PERCENTILE: f64 = 0.999;

/// Bit-width in `[2, 8]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const MIN: u32 = 2;
    pub const MAX: u32 = 8;

    pub fn new(bits: u32) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&bits) {
            return Err(QueptError::Argument(format!(
                "bit-width {bits} outside [{}, {}]",
                Self::MIN,
                Self::MAX
            )));
        }
        Ok(Self(bits as u8))
    }

    pub fn bits(self) -> u32 {
        self.0 as u32
    }

    /// `2^(b−1)`.
    pub fn half_range(self) -> i32 {
        1 << (self.0 - 1)
    }

    pub fn qmin(self) -> i32 {
        -self.half_range()
    }

    pub fn qmax(self) -> i32 {
        self.half_range() - 1
    }

    /// All bit-widths in `lo..=hi`.
    pub fn range(lo: u32, hi: u32) -> Result<Vec<Self>> {
        (lo..=hi).map(Self::new).collect()
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = QueptError;
    fn try_from(v: u32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Scale and zero-point of one weight quantizer evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightQuantParams<T> {
    pub scale: T,
    /// Integer-valued.
    pub zero_point: T,
    /// The clipped range was empty and `scale` was floored.
    pub degenerate: bool,
}

/// Frozen symmetric activation scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActQuantParams<T> {
    pub scale: T,
}

fn check_clips<T: Scalar>(alpha: T, beta: T) -> Result<()> {
    if !(alpha > T::zero() && beta > T::zero()) {
        return arg_err(format!("clip multipliers must be positive (alpha={alpha}, beta={beta})"));
    }
    Ok(())
}

pub fn compute_weight_qparams<T: Scalar>(
    w_eff: &Tensor<T>,
    alpha: T,
    beta: T,
    bits: BitWidth,
) -> Result<WeightQuantParams<T>> {
    check_clips(alpha, beta)?;
    let (_, mx) = w_eff.argmax();
    let (_, mn) = w_eff.argmin();
    let span = alpha * mx - beta * mn;
    let degenerate = !(span > T::zero());
    let scale = if degenerate {
        log::warn!("degenerate weight range (alpha*max - beta*min = {span}); flooring scale");
        T::lit(SCALE_FLOOR)
    } else {
        span * T::lit(1.0 / bits.half_range() as f64)
    };
    let zero_point = -(beta * mn / scale).round_half_even();
    Ok(WeightQuantParams {
        scale,
        zero_point,
        degenerate,
    })
}

/// Taped weight fake quantization of `w + r`.
///
/// Scale and zero-point are recomputed from the current `w + r`, `alpha` and
/// `beta`, so gradients reach all three through the straight-through paths.
pub fn fake_quant_weight<T: Scalar>(
    tape: &mut Tape<T>,
    w: Var,
    r: Var,
    alpha: Var,
    beta: Var,
    bits: BitWidth,
) -> Result<Var> {
    let (av, bv) = (tape.value(alpha).item(), tape.value(beta).item());
    check_clips(av, bv)?;
    let w_eff = tape.add(w, r)?;
    let mx = tape.max_all(w_eff);
    let mn = tape.min_all(w_eff);
    let hi_edge = tape.mul(alpha, mx)?;
    let lo_edge = tape.mul(beta, mn)?;
    let span = tape.sub(hi_edge, lo_edge)?;
    let s = if tape.value(span).item() > T::zero() {
        tape.scale(span, T::lit(1.0 / bits.half_range() as f64))
    } else {
        log::warn!("degenerate weight range; flooring scale");
        tape.scalar(T::lit(SCALE_FLOOR))
    };
    let z_raw = tape.div_scalar(lo_edge, s)?;
    let z_round = tape.round_ste(z_raw);
    let z = tape.neg(z_round);

    let scaled = tape.div_scalar(w_eff, s)?;
    let codes = tape.round_ste(scaled);
    let shifted = tape.add_scalar(codes, z)?;
    let clipped = tape.clip_ste(shifted, T::lit(bits.qmin() as f64), T::lit(bits.qmax() as f64))?;
    let neg_z = tape.neg(z);
    let centered = tape.add_scalar(clipped, neg_z)?;
    tape.mul_scalar(centered, s)
}

/// Eager weight fake quantization.
pub fn fake_quant_weight_value<T: Scalar>(
    w: &Tensor<T>,
    r: &Tensor<T>,
    alpha: T,
    beta: T,
    bits: BitWidth,
) -> Result<Tensor<T>> {
    w.same_shape(r, "fake_quant_weight")?;
    let mut tape = Tape::new();
    let (wv, rv) = (tape.constant(w.clone()), tape.constant(r.clone()));
    let (av, bv) = (tape.scalar(alpha), tape.scalar(beta));
    let out = fake_quant_weight(&mut tape, wv, rv, av, bv, bits)?;
    Ok(tape.value(out).clone())
}

/// Eager symmetric activation fake quantization, `s · clip(round(x/s))`.
pub fn fake_quant_act<T: Scalar>(x: &Tensor<T>, scale: T, bits: BitWidth) -> Result<Tensor<T>> {
    if !(scale > T::zero()) {
        return arg_err(format!("activation scale must be positive, got {scale}"));
    }
    let (lo, hi) = (T::lit(bits.qmin() as f64), T::lit(bits.qmax() as f64));
    Ok(x.map(|a| scale * (a / scale).round_half_even().max(lo).min(hi)))
}

/// `quantile(|x|, percentile) / (2^(b−1) − 1)`, floored at [`SCALE_FLOOR`].
pub fn init_act_scale<T: Scalar>(samples: &[Tensor<T>], bits: BitWidth, percentile: f64) -> Result<ActQuantParams<T>> {
    let q = abs_quantile(samples, percentile)?;
    Ok(act_scale_from_quantile(q, bits))
}

/// Quantile of `|x|` across all samples.
pub fn abs_quantile<T: Scalar>(samples: &[Tensor<T>], percentile: f64) -> Result<T> {
    if samples.is_empty() {
        return arg_err("no calibration samples for activation scale");
    }
    if !(percentile > 0.0 && percentile <= 1.0) {
        return arg_err(format!("percentile {percentile} outside (0, 1]"));
    }
    let mut mags: Vec<T> = samples.iter().flat_map(|t| t.data().iter().map(|v| v.abs())).collect();
    Ok(quantile(&mut mags, percentile))
}

pub fn act_scale_from_quantile<T: Scalar>(q: T, bits: BitWidth) -> ActQuantParams<T> {
    let s = q / T::lit(bits.qmax() as f64);
    ActQuantParams {
        scale: s.max(T::lit(SCALE_FLOOR)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(n: u32) -> BitWidth {
        BitWidth::new(n).unwrap()
    }

    fn row(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bitwidth_bounds() {
        assert!(BitWidth::new(1).is_err());
        assert!(BitWidth::new(9).is_err());
        assert_eq!(b(4).qmin(), -8);
        assert_eq!(b(4).qmax(), 7);
        assert_eq!(b(2).qmax(), 1);
    }

    #[test]
    fn weight_qparams_examples() {
        let p = compute_weight_qparams(&row(&[-1.0, 0.3, 1.0]), 1.0, 1.0, b(4)).unwrap();
        assert_eq!(p.scale, 0.25);
        assert_eq!(p.zero_point, 4.0);
        assert!(!p.degenerate);

        let p = compute_weight_qparams(&row(&[0.0, 0.0]), 1.0, 1.0, b(4)).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.scale, 1e-8);
        assert_eq!(p.zero_point, 0.0);

        let w = row(&[-0.7, 0.2, 1.3]);
        let p1 = compute_weight_qparams(&w, 1.0, 1.0, b(5)).unwrap();
        let p2 = compute_weight_qparams(&w.scale(2.0), 1.0, 1.0, b(5)).unwrap();
        assert_eq!(p2.scale, 2.0 * p1.scale);

        assert!(compute_weight_qparams(&w, 0.0, 1.0, b(4)).is_err());
    }

    #[test]
    fn fake_quant_weight_examples() {
        let w = row(&[-1.0, 1.0]);
        let zero = Tensor::zeros(&[1, 2]);
        let q = fake_quant_weight_value(&w, &zero, 1.0, 1.0, b(4)).unwrap();
        assert_eq!(q.data(), &[-1.0, 0.75]);

        // values on the grid s·(k − z) survive unchanged
        let w = row(&[-1.0, -0.5, 0.0, 0.25, 0.5, 1.0]);
        let q = fake_quant_weight_value(&w, &Tensor::zeros(&[1, 1]), 1.0, 1.0, b(4));
        assert!(q.is_err(), "shape mismatch must be rejected");
        let q = fake_quant_weight_value(&w, &Tensor::zeros(&[1, 6]), 1.0, 1.0, b(4)).unwrap();
        for (a, e) in q.data().iter().zip(&[-1.0, -0.5, 0.0, 0.25, 0.5, 0.75]) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn compensation_cancelling_weight_gives_zero() {
        let w = row(&[0.3, -1.2, 2.0, 0.7]);
        let r = w.scale(-1.0);
        let q = fake_quant_weight_value(&w, &r, 1.0, 1.0, b(4)).unwrap();
        assert!(q.data().iter().all(|v| v.abs() <= 0.5e-8));
    }

    #[test]
    fn fake_quant_act_examples() {
        let z = fake_quant_act(&row(&[0.0]), 0.37, b(3)).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let q = fake_quant_act(&row(&[0.25]), 0.1, b(8)).unwrap();
        assert!((q.data()[0] - 0.2).abs() < 1e-7);
        let q = fake_quant_act(&row(&[100.0]), 1.0, b(4)).unwrap();
        assert_eq!(q.data(), &[7.0]);
        assert!(fake_quant_act(&row(&[1.0]), 0.0, b(4)).is_err());
    }

    #[test]
    fn act_scale_examples() {
        let zeros = vec![Tensor::<f32>::zeros(&[4, 4])];
        assert_eq!(init_act_scale(&zeros, b(4), 0.999).unwrap().scale, 1e-8);
        let s = vec![row(&[1.0, -7.0, 3.0])];
        assert_eq!(init_act_scale(&s, b(4), 1.0).unwrap().scale, 1.0);
        let s2 = vec![s[0].scale(2.0)];
        assert_eq!(init_act_scale(&s2, b(4), 1.0).unwrap().scale, 2.0);
        assert!(init_act_scale::<f32>(&[], b(4), 0.5).is_err());
        assert!(init_act_scale(&s, b(4), 0.0).is_err());
    }
}
