//! Micro-expression recognition from onset/apex frame pairs.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`nn`], [`optim`], [`checkpoint`]: a small
//!   dense-tensor kernel with reverse-mode differentiation.
//! * [`dgm`]: the displacement-generation network, its warping losses and the
//!   self-supervised pair sampler.
//! * [`regions`]: landmark geometry, action-unit crops and patch tiling.
//! * [`fusion`]: attention blocks, the fusion layers and the three-level
//!   classifier.
//! * [`pipeline`]: end-to-end model, training, LOSO evaluation, metrics and
//!   the synthetic dataset generator.

pub mod autodiff;
pub mod checkpoint;
pub mod dgm;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod regions;
pub mod tensor;

pub use autodiff::{Gradients, Graph, NormMode, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Real, Tensor};
