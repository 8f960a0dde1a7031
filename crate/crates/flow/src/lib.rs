//! Glow-style normalizing flows: actnorm, invertible 1×1 convolutions, affine
//! couplings and multi-scale squeeze/split, all with exact log-determinants.
//!
//! Sign convention: the forward direction maps data to the latent space, so
//! `log p(x) = log p_Z(f(x)) + log|det ∂f/∂x|`.

pub mod error;
pub mod layers;
pub mod stack;

pub use error::{FlowError, Result};
pub use layers::{actnorm_apply, coupling_apply, invconv_apply, layer_apply, squeeze, Direction, Layer};
pub use stack::{gaussian_log_prob, FlowSpec, FlowStack};
