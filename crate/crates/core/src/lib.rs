//! Role-wise data augmentation for knowledge distillation.
//!
//! A teacher and a (possibly quantized) student each get their own per-epoch
//! augmentation schedule, found by population-based search; the student is
//! trained against the teacher with an intra/inter feature-relation loss.

pub mod augment;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod kdloss;
pub mod linalg;
pub mod nets;
pub mod pba;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
