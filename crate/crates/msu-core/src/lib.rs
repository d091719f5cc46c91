//! Micro-structured weight unification and pruning for neural network compression.
//!
//! Weight tensors are tiled into small blocks (e.g. `[2,2]`, `[8,1]`, `[2,2,2]`).
//! A *unified* block stores one shared magnitude plus the original signs; a
//! *pruned* block is all zero. Both shrink storage, and because the block shapes
//! align with the GEMM tiling used for inference, unified blocks also cut the
//! number of multiplications (one multiply per output row per block instead of
//! one per coefficient).
//!
//! The crate provides:
//! - [`tensor`]: dense row-major tensors, conv-to-GEMM lowering, Frobenius norms
//! - [`blocking`]: block partitions of weight tensors and block indexing
//! - [`projection`]: Euclidean projections onto the unification / pruning
//!   constraint sets, block selection, and constraint verification
//! - [`nn`]: a small trainable network engine (fc / conv / relu / pool) with
//!   exact backpropagation
//! - [`admm`]: constrained training via the alternating direction method of
//!   multipliers
//! - [`gemm`]: a micro-structured GEMM executor with exact multiply counting
//!   and MACs estimation
//!
//! The crate is `no_std` (with `alloc`); file formats and the CLI live in the
//! companion `msu-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod admm;
pub mod blocking;
pub mod error;
pub mod gemm;
pub mod nn;
pub mod projection;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
