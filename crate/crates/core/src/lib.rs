//! Core math for training-free multi-identity image customization.
//!
//! Everything in this crate is a pure function of its inputs and runs under
//! `no_std` with `alloc`:
//!
//! - [`attention`]: biased softmax attention, region-gated cross-attention over
//!   global + per-identity token blocks, and self-attention extended with
//!   features cached from inverted reference images.
//! - [`mask`]: bounding boxes and their rasterization onto attention grids.
//! - [`schedule`]: the deterministic DDIM update in both directions.
//! - [`backend`]: the model contracts (denoiser with attention hooks, encoders,
//!   codecs, depth and control adapters, evaluation scorers).
//! - [`toy`]: a fully deterministic desk-scale backend implementing every contract.
//! - [`pipeline`]: inversion with feature caching, repaint blending, depth
//!   preparation and the full generation loop.
//! - [`matching`] and [`metrics`]: greedy crop-to-reference assignment and the
//!   per-image / aggregated evaluation scores.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod array;
pub mod attention;
pub mod backend;
pub mod error;
pub mod imageops;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod pipeline;
mod rng;
pub mod schedule;
pub mod toy;

pub use array::RealArray;
pub use error::{Error, Result, Stage};
pub use mask::{rasterize_mask, BBox, SpatialMask};
