//! Weight-space retrieval and gated multi-adapter fusion for low-rank adapters.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`kernel`], [`autodiff`], [`nn`], [`optim`], [`gradcheck`] and
//!   [`rng`] form a small differentiable numeric substrate.
//! * [`lora`], [`svd`] and [`container`] hold the adapter data model, delta
//!   algebra, global-adapter construction and the binary containers.
//! * [`encoder`], [`text`], [`retriever`] and [`index`] embed adapters from their
//!   weights, align them with caption embeddings and serve exact top-k search.
//! * [`gate`] and [`fusion`] implement per-dimension gated fusion of any number
//!   of adapters and its interference-resistant training.
//! * [`toy`] is a small conditional rectified-flow host model with themed 2-D
//!   datasets, used to build an adapter pool and to measure fusion quality.
//! * [`config`] and [`pipeline`] tie everything into batch commands.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the math in the kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::should_implement_trait)]

pub mod autodiff;
pub mod config;
pub mod container;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gate;
pub mod gradcheck;
pub mod index;
pub mod kernel;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod retriever;
pub mod rng;
pub mod svd;
pub mod tensor;
pub mod text;
pub mod toy;

pub use error::{Error, FormatError, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
