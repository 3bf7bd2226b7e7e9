//! One-stream video object segmentation.
//!
//! A single hierarchical transformer consumes an RGB frame together with an
//! encoded optical-flow image and produces a binary mask of the primary
//! moving object. The image branch attends over concatenated image+motion
//! keys (the motion branch is self-contained), and a per-stage coarse mask
//! predicted from appearance tokens modulates the attention logits to
//! suppress background and flow noise.
//!
//! The crate is self-contained: a dense f32 tensor core with reverse-mode
//! differentiation, the model itself, a deterministic synthetic-video
//! generator with analytic flow, segmentation metrics, and portable storage
//! formats. Hot kernels are data-parallel via rayon (default `parallel`
//! feature) with a bitwise-identical sequential fallback.

pub mod attention;
pub mod check;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use tensor::{ops, Tensor};
