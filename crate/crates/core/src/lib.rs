//! Structure-aware tokenization and mixing for token-based vision models.
//!
//! Everything in this crate is pure computation over `f64` buffers and only
//! needs `alloc`: a small dense [`Tensor`] with a reverse-mode [`Tape`],
//! parameterized layers, the baseline and structure-aware tokenizers and
//! mixing blocks, exact parameter/FLOP accounting, the verification checks and
//! a toy trainer. File formats, configuration files and the command line live
//! in the `swat-cli` crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod autograd;
pub mod blocks;
pub mod complexity;
mod error;
pub mod kernels;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod verify;

pub use autograd::{Ctx, GradFault, OpKind, Tape, Var};
pub use blocks::{build_model, Model, ModelConfig, Variant};
pub use complexity::{count_flops, count_params, ComplexityReport};
pub use error::{Error, Result};
pub use nn::{InitPolicy, InitScheme, ParamId, ParamSet};
pub use tensor::Tensor;
pub use tokenizer::{StructureDescriptor, TokenGrid};
