//! Semi-supervised volumetric segmentation with a ConvNeXt-style 3-D
//! backbone, a k-means cross-attention query decoder, cluster-classification
//! postprocessing and dual contrastive consistency training.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, checkpoints and
//! the command-line tool live in the `kmaxseg` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod data;
mod error;
pub mod kmax;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod trainer;
pub mod postprocess;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
