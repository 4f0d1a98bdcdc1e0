//! End-to-end trainable semantic hashing on products of spheres.
//!
//! The pipeline maps feature vectors through a small fully connected
//! *catalyser* network onto a product of unit spheres, then through a
//! learned block-softmax quantiser into structured binary codes (M blocks,
//! one of K indices each). Training combines triplet losses with
//! nearest-neighbour entropy surrogates so the code space is used uniformly.
//! LSH, ITQ and PQ baselines plus a recall benchmark harness are included.

pub mod baselines;
pub mod codec;
pub mod config;
pub(crate) mod container;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod network;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
