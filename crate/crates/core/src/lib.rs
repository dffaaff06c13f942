//! Efficient visual state space model (EVSSM) for image deblurring.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, FFTs, gradient checking;
//! - [`sscan`]: zero-order-hold discretization and the selective scan;
//! - [`geometry`]: the per-module transpose/flip schedule and raster flattening;
//! - [`evs`]: the efficient visual scan block and the full EVSS module;
//! - [`edffn`]: the frequency-screened feedforward block and FFT cost model;
//! - [`net`]: the encoder-decoder, its loss, checkpoints and complexity counts;
//! - [`pipeline`]: synthetic data, AdamW, schedules, metrics and training;
//! - [`gradsuite`] and [`bench`]: finite-difference checks and kernel timings;
//! - [`config`]: the flat `key=value` configuration format.

// Range checks are written as `!(x >= lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod edffn;
pub mod error;
pub mod evs;
pub mod geometry;
pub mod gradsuite;
pub mod layers;
pub mod net;
pub mod pipeline;
pub mod sscan;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
