//! Mask-guided image restoration with a from-scratch reverse-mode autodiff
//! engine: wavelet U-Net, scale-aware bottleneck aggregation, a global
//! context branch and a soft guidance mask gating a residual correction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod context;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod saam;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use losses::{LossValues, LossWeights, PseudoMaskConfig};
pub use model::{Ablation, ModelConfig, UniBlendNet};
pub use params::ModelParams;
pub use tensor::{Graph, Precision, Scalar, Tensor, Var};
pub use train::{EvalReport, TrainConfig, TrainReport};
