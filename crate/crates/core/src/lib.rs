//! Attention-based feature distillation for object detectors, at desk scale.
//!
//! The crate provides a tape-based f64 autodiff core, the local/global
//! attention masks, feature normalization, the global-context relation
//! block, the full distillation loss stack, a synthetic detection world
//! with tiny teacher/student detectors, PR/mAP evaluation, and the training
//! orchestration used by the `afd` command-line tool.

pub mod error;
pub mod tensor;
mod conv;
pub mod tape;
pub mod nn;
pub mod gradcheck;
pub mod featnorm;
pub mod boxes;
pub mod attention;
pub mod gcontext;
pub mod losses;
pub mod scene;
pub mod toydet;
pub mod eval;
pub mod ckpt;
pub mod parallel;
pub mod config;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
