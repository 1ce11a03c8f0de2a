//! Inference-time alignment of paired-modality diffusion samplers in a shared
//! contrastive embedding space.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`], [`nn`]: dense `f64` tensors,
//!   a reverse-mode tape, Adam and small MLPs.
//! - [`diffusion`]: noise schedules, toy denoisers, latent autoencoders and
//!   the unguided DDIM/DDPM samplers.
//! - [`binder`]: the contrastive embedding model and the distance `1 - cos`.
//! - [`world`]: the synthetic paired dataset generator and its file format.
//! - [`aligner`]: guidance losses, the latent update, prompt tuning and the
//!   guided sampling loops.
//! - [`metrics`]: alignment scores, MMD and paired comparisons.
//! - [`harness`]: configuration, checkpoints and the CLI subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod aligner;
pub mod autodiff;
pub mod binder;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Software version echoed into every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
