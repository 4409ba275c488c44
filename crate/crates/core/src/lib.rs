//! N:M structured-sparse training with straight-through estimators.
//!
//! The crate provides:
//!
//! - [`sparse`]: hard and soft N:M thresholding, masks and flip rate
//! - [`rescale`]: frozen per-tensor scale factors for soft-thresholded weights
//! - [`mvue`]: unbiased randomized 2:4 sparsification of gradients
//! - [`lowprec`]: FP8 cast emulation with per-tensor scaling
//! - [`engine`]: sparse linear layers, a small reverse-mode tape, optimizers
//! - [`diagnostics`]: amount-of-descent, flip-rate and mask/weight decomposition traces
//! - [`experiment`]: toy and desk-scale experiment runners with CSV/JSON output

pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod lowprec;
pub mod mvue;
pub mod rescale;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use lowprec::FloatFormat;
pub use rescale::ScaleRegistry;
pub use sparse::{Mask, MaskedTensor, PruneConfig, RescaleRecipe};
pub use tensor::Tensor;
