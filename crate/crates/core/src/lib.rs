//! Desk-scale laboratory for training-free block-sparse attention.
//!
//! The crate is organized as a pipeline: [`synth`] generates deterministic
//! layer stacks and token sets, [`profiling`] calibrates a per-(layer, head)
//! sparsity schedule offline, [`partitioning`] groups queries and keys into
//! coupled blocks, [`selection`] picks the key blocks each query block
//! attends to, and [`metrics`] scores the result against the dense oracle
//! in [`attention`]. Everything rests on the small dense-linear-algebra
//! substrate in [`numerics`]. File formats live in [`io`], the end-to-end
//! harness in [`pipeline`] and [`verify`].

pub mod attention;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod partitioning;
pub mod pipeline;
pub mod profiling;
pub mod selection;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::Matrix;
