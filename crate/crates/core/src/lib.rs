//! Adversarial dual-autoencoder anomaly detection.
//!
//! Three networks are trained together on normal-class images only:
//!
//! * a generator autoencoder `G = G_d ∘ G_e`,
//! * a binary discriminator `D` separating inputs from reconstructions,
//! * an auxiliary autoencoder `D′` with the generator's architecture but its
//!   own parameters, acting as a reconstruction-based discriminator.
//!
//! A latent center `c`, fixed from one forward pass of the untrained encoder
//! over the training set, pulls normal latents together. At test time the
//! anomaly score of `x` is the per-pixel mean of `|x − D′(G(x))|`.
//!
//! Everything runs on the small reverse-mode engine in [`graph`] in double
//! precision; [`gradcheck`] verifies it against central finite differences.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
mod kernels;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
