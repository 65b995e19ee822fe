//! Reward-guided stochastic diffusion policy optimization for smoke removal.
//!
//! A small conditional diffusion restorer is pretrained on synthetic
//! smoky/clean pairs and then refined without a critic: groups of stochastic
//! reverse-diffusion rollouts are scored with physics-based color priors, a
//! concept-embedding semantic reward and reference-free quality scorers, and
//! the policy is updated with a clipped, group-normalized surrogate anchored
//! to the pretrained model by a KL penalty.
//!
//! Module map:
//!
//! - [`image`]: image tensors, channel statistics, percentiles, PSNR, PPM I/O
//! - [`smoke`]: scattering-model smoke synthesis and corpus generation
//! - [`diffusion`]: noise schedule, denoiser, stochastic sampling, checkpoints
//! - [`physics`]: inter/intra-channel color prior reward
//! - [`semantic`]: concept embeddings and the concept reward
//! - [`quality`]: reference-free quality scorers
//! - [`policy`]: advantages, ratios, clipped surrogate, KL anchor, training

pub mod diffusion;
pub mod error;
pub mod image;
pub mod physics;
pub mod policy;
pub mod quality;
pub mod rng;
pub mod semantic;
pub mod smoke;

pub use error::{Error, Result};
pub use image::{ChannelStats, ImageTensor};
