//! Selecting one bit configuration out of a calibrated model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::calibrate::{sweep, CalibratedModel, LayerBits};
use crate::error::{arg_err, QueptError, Result};
use crate::model::{LayerRef, LinearQuant, ToyModel};
use crate::quantizer::{fake_quant_weight, BitWidth};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Requested deployment bit-widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BitConfig {
    /// Every layer at one bit-width; activations follow the calibration setup.
    Uniform(BitWidth),
    FullPrecision,
    PerLayer(Vec<LayerBits>),
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedLayerBits {
    name: String,
    #[serde(flatten)]
    bits: LayerBits,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BitConfigDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uniform: Option<BitWidth>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    full_precision: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    layer: Vec<NamedLayerBits>,
}

impl BitConfig {
    /// Parses a TOML document holding exactly one of `uniform = b`,
    /// `full_precision = true` or a list of `[[layer]]` tables.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: BitConfigDoc = toml::from_str(text).map_err(|e| QueptError::Format(e.to_string()))?;
        match (doc.uniform, doc.full_precision, doc.layer.is_empty()) {
            (Some(b), false, true) => Ok(Self::Uniform(b)),
            (None, true, true) => Ok(Self::FullPrecision),
            (None, false, false) => {
                for (i, l) in doc.layer.iter().enumerate() {
                    let expected = LayerRef::from_index(i).to_string();
                    if l.name != expected {
                        return arg_err(format!("layer entry {i} is `{}`, expected `{expected}`", l.name));
                    }
                }
                Ok(Self::PerLayer(doc.layer.into_iter().map(|l| l.bits).collect()))
            }
            _ => arg_err("bit config needs exactly one of `uniform`, `full_precision` or `[[layer]]`"),
        }
    }

    pub fn to_toml(&self) -> String {
        let doc = match self {
            Self::Uniform(b) => BitConfigDoc {
                uniform: Some(*b),
                ..Default::default()
            },
            Self::FullPrecision => BitConfigDoc {
                full_precision: true,
                ..Default::default()
            },
            Self::PerLayer(bits) => BitConfigDoc {
                layer: bits
                    .iter()
                    .enumerate()
                    .map(|(i, &bits)| NamedLayerBits {
                        name: LayerRef::from_index(i).to_string(),
                        bits,
                    })
                    .collect(),
                ..Default::default()
            },
        };
        toml::to_string(&doc).expect("bit config serializes")
    }

    /// Per-layer bit-widths for `cal`.
    pub fn resolve<T: Scalar>(&self, cal: &CalibratedModel<T>) -> Result<Vec<LayerBits>> {
        let n = cal.layers.len();
        let bits = match self {
            Self::Uniform(b) => cal.uniform_bits(*b),
            Self::FullPrecision => vec![LayerBits::default(); n],
            Self::PerLayer(v) if v.len() == n => v.clone(),
            Self::PerLayer(v) => return arg_err(format!("{} layer entries for a {n}-layer model", v.len())),
        };
        for (i, lb) in bits.iter().enumerate() {
            for b in [lb.weight, lb.act].into_iter().flatten() {
                if !cal.setup.partition.contains(b) {
                    return Err(QueptError::UnsupportedBit {
                        layer: LayerRef::from_index(i).to_string(),
                        bit: b.bits(),
                    });
                }
            }
        }
        Ok(bits)
    }
}

/// Frozen quantization parameters of one deployed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeployedLayer<T> {
    pub bits: LayerBits,
    /// `(A[:r,:], B[:,:r])` when the weight is quantized.
    pub adapter: Option<(Tensor<T>, Tensor<T>)>,
    pub alpha: T,
    pub beta: T,
    pub act_scale: Option<T>,
}

/// A single-configuration quantized model. Holds no optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct DeployableModel<T> {
    pub model: ToyModel<T>,
    pub layers: Vec<DeployedLayer<T>>,
}

/// Extracts the adapter slices, clips and activation scales `config` selects.
/// Pure selection: no parameter of `cal` is touched.
pub fn configure<T: Scalar>(cal: &CalibratedModel<T>, config: &BitConfig) -> Result<DeployableModel<T>> {
    let bits = config.resolve(cal)?;
    let mut layers = Vec::with_capacity(bits.len());
    for (i, lb) in bits.into_iter().enumerate() {
        let state = &cal.layers[i];
        let layer = LayerRef::from_index(i);
        let (adapter, alpha, beta) = match lb.weight {
            Some(b) => {
                let tier = cal.tier_for(layer, b)?;
                let (a, bb) = state.clips[&b];
                (
                    Some(state.adapter.slice_values(&cal.store, tier)?),
                    cal.store.value(a).item(),
                    cal.store.value(bb).item(),
                )
            }
            None => (None, T::one(), T::one()),
        };
        let act_scale = lb.act.map(|b| state.act_scales[&b]);
        layers.push(DeployedLayer {
            bits: lb,
            adapter,
            alpha,
            beta,
            act_scale,
        });
    }
    Ok(DeployableModel {
        model: cal.model.clone(),
        layers,
    })
}

impl<T: Scalar> LinearQuant<T> for DeployableModel<T> {
    fn weight(&self, tape: &mut Tape<T>, layer: LayerRef, w: Var) -> Result<Var> {
        let l = &self.layers[layer.index()];
        let (Some(b), Some((a, bb))) = (l.bits.weight, &l.adapter) else {
            return Ok(w);
        };
        let a = tape.constant(a.clone());
        let bb = tape.constant(bb.clone());
        let r = tape.matmul(bb, a)?;
        let alpha = tape.scalar(l.alpha);
        let beta = tape.scalar(l.beta);
        fake_quant_weight(tape, w, r, alpha, beta, b)
    }

    fn input(&self, tape: &mut Tape<T>, layer: LayerRef, x: Var) -> Result<Var> {
        let l = &self.layers[layer.index()];
        match (l.bits.act, l.act_scale) {
            (Some(b), Some(s)) => tape.fake_quant_act(x, s, T::lit(b.qmin() as f64), T::lit(b.qmax() as f64)),
            _ => Ok(x),
        }
    }
}

impl<T: Scalar> DeployableModel<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        sweep(x, |chunk| self.model.forward(chunk, self))
    }

    pub fn bits(&self) -> Vec<LayerBits> {
        self.layers.iter().map(|l| l.bits).collect()
    }

    /// Mean bit-width over quantized weight layers, full precision counted as 32.
    pub fn average_weight_bits(&self) -> f64 {
        let total: u32 = self.layers.iter().map(|l| l.bits.weight.map_or(32, BitWidth::bits)).sum();
        total as f64 / self.layers.len() as f64
    }
}
