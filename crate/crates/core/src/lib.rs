//! Desk-scale unsupervised domain adaptation for 3D segmentation with a
//! VAE shape prior.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`volume`], [`graph`], [`params`]: a dense f32 tensor
//!   substrate with tape-based reverse-mode differentiation and SGD.
//! - [`synth`]: synthetic domain-shifted phantom generation, preprocessing
//!   and augmentation, plus the `.vuda` volume container.
//! - [`segnet`]: the 3D U-Net segmenter and Dice loss.
//! - [`vae`]: the mask VAE shape prior (reconstruction loss, quality score).
//! - [`uda`]: pseudo loss, dynamic loss weighting, target adaptation,
//!   test-time training, and the baseline strategies.
//! - [`eval`]: metrics, ablation/sweep/comparison experiments and the loss
//!   scatter analysis.

pub mod blocks;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod graph;
pub mod kernels;
pub mod manifest;
pub mod params;
pub mod rng;
pub mod segnet;
pub mod svg;
pub mod synth;
pub mod tensor;
pub mod uda;
pub mod vae;
pub mod volume;

pub use error::{CoreError, Result};
pub use graph::{BnMode, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
pub use volume::{read_volume, write_volume, Volume};
