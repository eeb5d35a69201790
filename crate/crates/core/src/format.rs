//! Single-file tensor container and the artifact types stored in it.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, a TOML
//! manifest, then the payload of little-endian `f32` blobs. The manifest
//! indexes every blob by name with its shape, byte range and SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::CascadedAdapter;
use crate::autodiff::ParamStore;
use crate::calibrate::{clip_names, CalibratedModel, LayerBits, LayerState, QuantSetup};
use crate::deploy::{DeployableModel, DeployedLayer};
use crate::error::{QueptError, Result};
use crate::model::{CalibSet, LayerKind, LayerRef, Linear, ModelDims, ToyBlock, ToyModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QEPTART\0";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_MODEL: &str = "model";
pub const KIND_CALIB: &str = "calib";
pub const KIND_CALIBRATED: &str = "calibrated";
pub const KIND_DEPLOYABLE: &str = "deployable";

const HEADER_LEN: usize = MAGIC.len() + 8;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    meta: toml::Table,
    #[serde(default)]
    tensor: Vec<Entry>,
}

/// Named `f32` tensors plus a metadata table.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: toml::Table,
    tensors: BTreeMap<String, Tensor<f32>>,
}

fn format_err(msg: impl Into<String>) -> QueptError {
    QueptError::Format(msg.into())
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: toml::Table::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = t.data().iter().map(|v| v.to_f32_lossy()).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("shape already validated");
        self.tensors.insert(name.into(), t);
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| format_err(format!("missing tensor `{name}`")))?;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| T::lit(v as f64)).collect())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn set_meta<M: Serialize>(&mut self, key: &str, value: &M) -> Result<()> {
        let v = toml::Value::try_from(value).map_err(|e| format_err(e.to_string()))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta<M: DeserializeOwned>(&self, key: &str) -> Result<M> {
        self.meta
            .get(key)
            .ok_or_else(|| format_err(format!("manifest lacks `meta.{key}`")))?
            .clone()
            .try_into()
            .map_err(|e| format_err(format!("meta.{key}: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(format_err(format!("expected a `{kind}` file, found `{}`", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let blob = &payload[offset as usize..];
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: blob.len() as u64,
                sha256: hex::encode(Sha256::digest(blob)),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensor: entries,
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + text.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Validates the version before anything else is decoded, then bounds and
    /// checksums every blob.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(QueptError::Truncated {
                name: "header".into(),
                need: HEADER_LEN as u64,
                have: bytes.len() as u64,
            });
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(format_err("not a container file (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[MAGIC.len()..HEADER_LEN].try_into().unwrap());
        let body = &bytes[HEADER_LEN..];
        if mlen > body.len() as u64 {
            return Err(QueptError::Truncated {
                name: "manifest".into(),
                need: mlen,
                have: body.len() as u64,
            });
        }
        let (text, payload) = body.split_at(mlen as usize);
        let text = std::str::from_utf8(text).map_err(|e| format_err(format!("manifest is not utf-8: {e}")))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| format_err(format!("manifest: {e}")))?;
        match raw.get("format_version").and_then(toml::Value::as_integer) {
            Some(v) if v == FORMAT_VERSION as i64 => {}
            Some(found) => {
                return Err(QueptError::Version {
                    found,
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(format_err("manifest lacks `format_version`")),
        }
        let manifest: Manifest = raw.try_into().map_err(|e| format_err(format!("manifest: {e}")))?;
        let mut tensors = BTreeMap::new();
        for e in manifest.tensor {
            let end = e.offset.saturating_add(e.len);
            if end > payload.len() as u64 {
                return Err(QueptError::Truncated {
                    name: e.name,
                    need: end,
                    have: payload.len() as u64,
                });
            }
            let blob = &payload[e.offset as usize..end as usize];
            if hex::encode(Sha256::digest(blob)) != e.sha256 {
                return Err(QueptError::Checksum(e.name));
            }
            let numel: usize = e.shape.iter().product();
            if numel * 4 != blob.len() {
                return Err(format_err(format!("tensor `{}` size does not match its shape", e.name)));
            }
            let data = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::new(e.shape, data)?).is_some() {
                return Err(format_err(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn weight_name(layer: LayerRef) -> String {
    format!("{layer}.weight")
}

fn bias_name(layer: LayerRef) -> String {
    format!("{layer}.bias")
}

fn act_scale_name(layer: LayerRef, b: crate::quantizer::BitWidth) -> String {
    format!("{layer}.act.a{b}.scale")
}

fn put_weights<T: Scalar>(c: &mut Container, model: &ToyModel<T>) -> Result<()> {
    c.set_meta("dims", &model.dims)?;
    for (i, block) in model.blocks.iter().enumerate() {
        for kind in LayerKind::ALL {
            let layer = LayerRef { block: i, kind };
            let lin = block.linear(kind);
            c.insert(weight_name(layer), &lin.weight);
            c.insert(bias_name(layer), &lin.bias);
        }
    }
    Ok(())
}

fn take_weights<T: Scalar>(c: &Container) -> Result<ToyModel<T>> {
    let dims: ModelDims = c.meta("dims")?;
    dims.validate()?;
    let mut blocks = Vec::with_capacity(dims.blocks);
    for i in 0..dims.blocks {
        let mut linears = Vec::with_capacity(LayerKind::ALL.len());
        for kind in LayerKind::ALL {
            let layer = LayerRef { block: i, kind };
            let (out, inp) = dims.weight_shape(kind);
            let weight = c.get(&weight_name(layer))?;
            let bias = c.get(&bias_name(layer))?;
            if weight.shape() != [out, inp] || bias.shape() != [out] {
                return Err(format_err(format!("`{layer}` has the wrong shape")));
            }
            linears.push(Linear { weight, bias });
        }
        let linears = linears.try_into().map_err(|_| format_err("block layer count"))?;
        blocks.push(ToyBlock { linears });
    }
    Ok(ToyModel { dims, blocks })
}

impl<T: Scalar> ToyModel<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(KIND_MODEL);
        put_weights(&mut c, self)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND_MODEL)?;
        take_weights(c)
    }
}

impl<T: Scalar> CalibSet<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(KIND_CALIB);
        c.set_meta("seed", &self.seed.to_string())?;
        c.insert("data", &self.data);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND_CALIB)?;
        let seed: String = c.meta("seed")?;
        let seed = seed.parse().map_err(|e| format_err(format!("meta.seed: {e}")))?;
        let data = c.get("data")?;
        if data.shape().len() != 3 || data.shape()[0] == 0 {
            return Err(format_err("calibration data must be a non-empty (n, t, d) tensor"));
        }
        Ok(Self { seed, data })
    }
}

impl<T: Scalar> CalibratedModel<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(KIND_CALIBRATED);
        put_weights(&mut c, &self.model)?;
        c.set_meta("setup", &self.setup)?;
        for (_, name, var) in self.store.iter() {
            c.insert(name, &var.value);
        }
        for (i, state) in self.layers.iter().enumerate() {
            let layer = LayerRef::from_index(i);
            for (&b, &s) in &state.act_scales {
                c.insert(act_scale_name(layer, b), &Tensor::scalar(s));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND_CALIBRATED)?;
        let model = take_weights(c)?;
        let setup: QuantSetup = c.meta("setup")?;
        let bits = setup.partition.bits();
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(model.dims.layer_count());
        for i in 0..model.dims.layer_count() {
            let layer = LayerRef::from_index(i);
            let prefix = layer.to_string();
            for name in c.names().filter(|n| n.starts_with(&format!("{prefix}.lora"))) {
                store.insert(name, c.get(name)?, true)?;
            }
            let shape = model.dims.weight_shape(layer.kind);
            let adapter = CascadedAdapter::attach(&store, &prefix, shape, setup.ranks, setup.sharing)?;
            let mut clips = BTreeMap::new();
            let mut act_scales = BTreeMap::new();
            for &b in &bits {
                let (an, bn) = clip_names(layer, b);
                let a = store.insert(an.as_str(), c.get(&an)?, true)?;
                let bb = store.insert(bn.as_str(), c.get(&bn)?, true)?;
                clips.insert(b, (a, bb));
                act_scales.insert(b, c.get::<T>(&act_scale_name(layer, b))?.item());
            }
            layers.push(LayerState {
                adapter,
                clips,
                act_scales,
            });
        }
        CalibratedModel::from_parts(model, setup, store, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl<T: Scalar> DeployableModel<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(KIND_DEPLOYABLE);
        put_weights(&mut c, &self.model)?;
        let bits: Vec<LayerBits> = self.layers.iter().map(|l| l.bits).collect();
        c.set_meta("layer_bits", &bits)?;
        for (i, l) in self.layers.iter().enumerate() {
            let layer = LayerRef::from_index(i);
            if let Some((a, b)) = &l.adapter {
                c.insert(format!("{layer}.adapter.a"), a);
                c.insert(format!("{layer}.adapter.b"), b);
                c.insert(format!("{layer}.clip.alpha"), &Tensor::scalar(l.alpha));
                c.insert(format!("{layer}.clip.beta"), &Tensor::scalar(l.beta));
            }
            if let Some(s) = l.act_scale {
                c.insert(format!("{layer}.act.scale"), &Tensor::scalar(s));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND_DEPLOYABLE)?;
        let model = take_weights(c)?;
        let bits: Vec<LayerBits> = c.meta("layer_bits")?;
        if bits.len() != model.dims.layer_count() {
            return Err(format_err("layer_bits does not cover every layer"));
        }
        let mut layers = Vec::with_capacity(bits.len());
        for (i, lb) in bits.into_iter().enumerate() {
            let layer = LayerRef::from_index(i);
            let (adapter, alpha, beta) = match lb.weight {
                Some(_) => (
                    Some((c.get(&format!("{layer}.adapter.a"))?, c.get(&format!("{layer}.adapter.b"))?)),
                    c.get::<T>(&format!("{layer}.clip.alpha"))?.item(),
                    c.get::<T>(&format!("{layer}.clip.beta"))?.item(),
                ),
                None => (None, T::one(), T::one()),
            };
            let act_scale = match lb.act {
                Some(_) => Some(c.get::<T>(&format!("{layer}.act.scale"))?.item()),
                None => None,
            };
            layers.push(DeployedLayer {
                bits: lb,
                adapter,
                alpha,
                beta,
                act_scale,
            });
        }
        Ok(Self { model, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.set_meta("answer", &42u32).unwrap();
        c.insert("b", &Tensor::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]).unwrap());
        c.insert("a", &Tensor::scalar(0.5f64));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta::<u32>("answer").unwrap(), 42);
        assert_eq!(back.get::<f32>("b").unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(Container::from_bytes(&bytes), Err(QueptError::Checksum(n)) if n == "b"));
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 3]),
            Err(QueptError::Truncated { .. })
        ));
        assert!(matches!(Container::from_bytes(&bytes[..10]), Err(QueptError::Truncated { .. })));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = sample().to_bytes();
        let at = bytes.windows(18).position(|w| w == b"format_version = 1").unwrap();
        bytes[at + 17] = b'9';
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(QueptError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(QueptError::Format(_))));
    }
}
