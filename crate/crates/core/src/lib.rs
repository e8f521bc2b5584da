//! Bimodal mask-aware adaptive convolution (Bi²MAC) for pansharpening.
//!
//! The crate is generic over the floating-point element type through
//! [`Scalar`]; `f64` aliases are provided at the root for the common case.

pub mod camg;
pub mod data;
pub mod error;
pub mod flops;
pub mod io;
pub mod lowrank;
pub mod mabic;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod params;
pub mod region;
pub mod resample;
pub mod scalar;
pub mod tally;
pub mod tensor;
pub mod train;

pub use camg::{CamgParams, MaskPair};
pub use error::{Error, Result};
pub use lowrank::{BaseKernel, LowRankKernel};
pub use mabic::{BiMacConfig, BiMacParams, Routing};
pub use net::{Ablation, Bi2MaNet, NetConfig};
pub use params::{Conv, Linear, ParamGroup, Parameters};
pub use scalar::Scalar;
pub use tally::{OpCount, OpTally, Stage};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type BiMacParams64 = BiMacParams<f64>;
pub type BiMacParams32 = BiMacParams<f32>;
pub type Bi2MaNet64 = Bi2MaNet<f64>;
pub type Bi2MaNet32 = Bi2MaNet<f32>;
