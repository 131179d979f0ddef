//! Open-vocabulary detection with image-text fusion.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numeric piece of
//! the pipeline: a reverse-mode autodiff [`tape`], the token-hash text
//! embedder and class sampler in [`text`], the patch-embedding backbone, the
//! text-guided fusion encoder, the query decoder with its contrastive head,
//! matching and losses, evaluation metrics, and the synthetic scene
//! generator and tiler. File formats and the command line live in the
//! `ovd-cli` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod boxes;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod matching;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod tiling;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
