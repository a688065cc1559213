//! A desk-scale, fully offline pipeline for fine-tuning diffusion action
//! policies inside a learned latent world model.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`], [`graph`], [`nn`], [`opt`], [`prob`] — a minimal f64 tensor
//!   and reverse-mode autodiff core with the optimizers and probability
//!   primitives every other module consumes.
//! - [`env`] — a deterministic, seedable tabletop benchmark with rendered
//!   image observations, scripted controllers, and ground-truth success
//!   predicates.
//! - [`wm`] — a recurrent state-space world model trained by a KL-balanced
//!   reconstruction objective on play data; provides latent featurization
//!   and imagination rollouts.
//! - [`policy`] — a DDPM action head (plus a unimodal Gaussian variant)
//!   conditioned on world-model features, pre-trained by behavior cloning.
//! - [`reward`] — a latent success classifier trained with contrastive and
//!   cross-entropy losses; supplies rewards for imagined rollouts.
//! - [`dream`] — the denoising-step MDP over imagined latent transitions,
//!   with GAE, clipped policy-gradient updates, and behavior-cloning
//!   regularization.
//! - [`baseline`] — the same machinery run online against the real
//!   environment, counting every physical interaction.
//! - [`config`], [`io`], [`eval`] — run configuration, the shared
//!   checkpoint/dataset container, metrics, and evaluation protocol.

pub mod baseline;
pub mod check;
pub mod config;
pub mod data;
pub mod dream;
pub mod env;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod nn;
pub mod opt;
pub mod policy;
pub mod prob;
pub mod reward;
pub mod rng;
pub mod tensor;
pub mod wm;

pub use error::{Error, Result};
pub use graph::{GradStore, Graph, Var};
pub use tensor::Tensor;
