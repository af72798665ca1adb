//! Multimodal spatial-temporal single-object tracking at toy scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autograd`], [`params`]: dense arrays, the reverse-mode tape
//!   and named parameter storage.
//! - [`ssm`]: zero-order-hold discretization, selective scans and mamba blocks.
//! - [`encoder`], [`bsi`]: the shared-weight one-stream transformer over
//!   `[templates; search; temporal]` tokens and per-layer background
//!   suppression with cross-modal prompts.
//! - [`tsg`], [`fusion`], [`head`]: temporal token generation, mamba fusion,
//!   and the convolutional head with its losses.
//! - [`model`], [`tracker`]: the full per-frame network and the tracking loop.
//! - [`synth`], [`metrics`]: synthetic paired-modality sequences and
//!   success/precision evaluation.
//! - [`train`], [`check`], [`oracle`], [`dump`]: the toy trainer, the
//!   self-check suites with their naive references, and debug heatmaps.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod bsi;
pub mod check;
pub mod config;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod head;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod tsg;

pub use autograd::{fd_gradient, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamStore, Session};
pub use tensor::{Precision, Tensor};
