//! Unsupervised domain alignment with two normalizing flows sharing one
//! Gaussian latent space, trained with per-domain likelihood plus WGAN-GP
//! adversarial terms on the cross-domain maps.

pub mod critic;
pub mod error;
pub mod loss;
pub mod model;
pub mod sampling;
pub mod train;

pub use critic::Critic;
pub use error::{AlignError, Result};
pub use loss::{generator_adv_loss, generator_terms, mle_loss, wgan_gp_critic_loss, CriticTerms, GeneratorTerms};
pub use model::{AlignFlowModel, CrossDirection, ModelSpec};
pub use sampling::{interpolate, sample_conditional, sample_unconditional, slerp, InterpolationFrame, InterpolationSpec, SamplingSpec};
pub use train::{alignflow_total_loss, read_history, sample_batches, train, train_step, write_history, LossRecord, TrainConfig};
