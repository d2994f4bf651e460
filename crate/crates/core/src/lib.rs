//! Attention-based multiple-instance learning with pixel-level explanations.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: the synthetic bag generator, the MIL network and its trainer,
//! four attribution methods (GradCAM, LRP, IBA, InputIBA) and the faithfulness
//! benchmark (insertion/deletion curves, ROAR, localization). File formats, the
//! CLI and rendering live in the `milx` crate.
#![no_std]

extern crate alloc;

pub mod attributions;
pub mod bagdata;
pub mod error;
pub mod evalbench;
pub mod metrics;
pub mod milnet;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
