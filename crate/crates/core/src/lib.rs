//! Alignment, optical-flow and video super-resolution kernels.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line and
//! thread pools live in the `alignkit` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adastn;
pub mod align;
pub mod bench;
pub mod conv;
pub mod error;
pub mod filter;
pub mod fit;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;
pub mod rectify;
pub mod sample;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FlowField, Tensor};
