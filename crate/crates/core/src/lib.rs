//! Elastic multi-bit post-training quantization for transformer blocks.
//!
//! One block-wise calibration pass trains learnable weight clips and a
//! cascaded low-rank compensation per linear layer. Afterwards the model can
//! be configured to any bit-width of the calibrated set, uniformly or per
//! layer, by slicing the shared adapter. No further optimization is needed.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Production
//! paths and the on-disk format use `f32`; the `*32` aliases below name those
//! instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod autodiff;
pub mod calibrate;
pub mod deploy;
pub mod error;
pub mod format;
pub mod merge;
pub mod mixed;
pub mod model;
pub mod optim;
pub mod quantizer;
pub mod scalar;
pub mod tensor;

pub use adapter::{CascadedAdapter, RankPartition, SharingMode, Tier};
pub use autodiff::{ParamId, ParamStore, Tape, Var, Variable};
pub use calibrate::{calibrate_model, CalibConfig, LayerBits, LossKind, QuantSetup, TierPartition};
pub use deploy::{configure, BitConfig};
pub use error::{QueptError, Result};
pub use merge::{MergeCase, MergePolicy};
pub use model::{CalibSet, ModelDims};
pub use quantizer::BitWidth;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;




pub type ToyModel32 = model::ToyModel<f32>;
pub type CalibSet32 = model::CalibSet<f32>;
pub type CalibratedModel32 = calibrate::CalibratedModel<f32>;
pub type DeployableModel32 = deploy::DeployableModel<f32>;
pub type SensitivityTable32 = mixed::SensitivityTable<f32>;
pub type SensitivityTable64 = mixed::SensitivityTable<f64>;
