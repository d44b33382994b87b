//! Core algorithms for sparse query-point temporal action detection.
//!
//! Everything in this crate is pure computation over owned buffers: a small
//! reverse-mode autodiff graph ([`graph`]), temporal interval geometry
//! ([`geom`]), the action decoder with learnable query points ([`decoder`]),
//! Hungarian set matching and the training losses ([`matching`], [`loss`]),
//! detection/segmentation mAP evaluation ([`eval`]), a synthetic multi-label
//! dataset generator ([`synth`]), an AdamW optimizer ([`optim`]) and a
//! finite-difference gradient checker ([`gradcheck`]).
//!
//! The crate is `no_std`-compatible (requires `alloc`); file formats, the
//! CLI and all IO live in the companion `pointtad` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decoder;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod matching;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};
