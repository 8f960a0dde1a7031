//! Likelihood and Wasserstein terms of the hybrid objective.
//!
//! Everything here is minimized. The generator objective is
//! `adv_x + adv_y + λ_x·mle_x + λ_y·mle_y` where the likelihood terms are
//! negative log-likelihoods in nats per dimension; the critic objective is
//! the negated Wasserstein estimate plus the gradient penalty.

use flowscale_flow::{gaussian_log_prob, FlowStack};
use flowscale_tensor::{Graph, Tensor, Var};
use rand::Rng;

use crate::critic::Critic;
use crate::error::{AlignError, Result};
use crate::model::{AlignFlowModel, CrossDirection};

/// Added under the square root of the gradient norm so a critic with zero
/// input gradient still has a finite penalty gradient.
const NORM_FLOOR: f64 = 1e-12;

/// Negative mean log-likelihood of a batch, as `(total, per_dimension)`.
pub fn mle_loss(g: &mut Graph<'_>, flow: &FlowStack, batch: Var) -> Result<(Var, Var)> {
    let lp = flow.log_prob(g, batch)?;
    let mean = g.mean(lp)?;
    let nll = g.neg(mean)?;
    let per_dim = g.scale(nll, 1.0 / flow.dim() as f64)?;
    Ok((nll, per_dim))
}

/// `-mean(c(fake))`.
pub fn generator_adv_loss(g: &mut Graph<'_>, critic: &Critic, fake: Var) -> Result<Var> {
    let s = critic.score(g, fake)?;
    let m = g.mean(s)?;
    Ok(g.neg(m)?)
}

pub struct CriticTerms {
    /// `wasserstein + penalty`.
    pub total: Var,
    /// `mean(c(fake)) - mean(c(real))`.
    pub wasserstein: Var,
    /// `λ_gp·mean((‖∇c(x̂)‖ - 1)²)`.
    pub penalty: Var,
}

/// WGAN-GP critic loss. `u` holds one interpolation weight per item, with
/// `x̂ = u·real + (1 - u)·fake`. The graph must be recording when
/// `lambda_gp > 0`, since the penalty differentiates the critic.
pub fn wgan_gp_critic_loss(
    g: &mut Graph<'_>,
    critic: &Critic,
    real: &Tensor,
    fake: &Tensor,
    lambda_gp: f64,
    u: &[f64],
) -> Result<CriticTerms> {
    if real.shape() != fake.shape() {
        return Err(AlignError::Shape(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let n = real.shape()[0];
    if u.len() != n {
        return Err(AlignError::Shape(format!("{} interpolation weights for {n} items", u.len())));
    }
    if lambda_gp < 0.0 {
        return Err(AlignError::Config(format!("negative gradient penalty weight {lambda_gp}")));
    }
    let rv = g.input(real.clone());
    let fv = g.input(fake.clone());
    let sr = critic.score(g, rv)?;
    let sf = critic.score(g, fv)?;
    let mr = g.mean(sr)?;
    let mf = g.mean(sf)?;
    let wasserstein = g.sub(mf, mr)?;

    let penalty = if lambda_gp > 0.0 {
        if !g.is_recording() {
            return Err(AlignError::Config("the gradient penalty needs a recording graph".into()));
        }
        let per = real.numel() / n;
        let mut mixed = Vec::with_capacity(real.numel());
        for (i, (r, f)) in real.data().chunks(per).zip(fake.data().chunks(per)).enumerate() {
            mixed.extend(r.iter().zip(f).map(|(a, b)| u[i] * a + (1.0 - u[i]) * b));
        }
        let xhat = g.leaf(Tensor::new(real.shape().to_vec(), mixed)?, true);
        let scores = critic.score(g, xhat)?;
        let total = g.sum(scores)?;
        let grad = g.grad(total, &[xhat], true)?[0];
        let sq = g.square(grad)?;
        let norm2 = g.sum_per_item(sq)?;
        let norm2 = g.add_scalar(norm2, NORM_FLOOR)?;
        let norm = g.sqrt(norm2)?;
        let dev = g.add_scalar(norm, -1.0)?;
        let dev2 = g.square(dev)?;
        let mean = g.mean(dev2)?;
        g.scale(mean, lambda_gp)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let total = g.add(wasserstein, penalty)?;
    Ok(CriticTerms { total, wasserstein, penalty })
}

/// Draw one interpolation weight per item.
pub fn interpolation_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Generator-side terms built on one graph from one pair of batches.
pub struct GeneratorTerms {
    pub mle_x: Var,
    pub mle_y: Var,
    pub adv_x: Var,
    pub adv_y: Var,
    pub total: Var,
    /// `x̂ = f_X⁻¹(f_Y(y))`.
    pub fake_x: Var,
    /// `ŷ = f_Y⁻¹(f_X(x))`.
    pub fake_y: Var,
    pub latent_x: Var,
    pub latent_y: Var,
}

pub fn generator_terms(
    g: &mut Graph<'_>,
    model: &AlignFlowModel,
    batch_x: &Tensor,
    batch_y: &Tensor,
    lambda_x: f64,
    lambda_y: f64,
) -> Result<GeneratorTerms> {
    let xv = g.input(batch_x.clone());
    let yv = g.input(batch_y.clone());
    let dx = model.flow_x.dim() as f64;
    let dy = model.flow_y.dim() as f64;

    let (zx, ldx) = model.flow_x.forward(g, xv)?;
    let (zy, ldy) = model.flow_y.forward(g, yv)?;
    let mle_x = per_dim_nll(g, zx, ldx, dx)?;
    let mle_y = per_dim_nll(g, zy, ldy, dy)?;

    // cross maps reuse the latents above rather than re-encoding
    let (fake_y, _) = model.target_flow(CrossDirection::XToY).inverse(g, zx)?;
    let (fake_x, _) = model.target_flow(CrossDirection::YToX).inverse(g, zy)?;
    let adv_x = generator_adv_loss(g, &model.critic_x, fake_x)?;
    let adv_y = generator_adv_loss(g, &model.critic_y, fake_y)?;

    let adv = g.add(adv_x, adv_y)?;
    let wx = g.scale(mle_x, lambda_x)?;
    let wy = g.scale(mle_y, lambda_y)?;
    let mle = g.add(wx, wy)?;
    let total = g.add(adv, mle)?;
    Ok(GeneratorTerms { mle_x, mle_y, adv_x, adv_y, total, fake_x, fake_y, latent_x: zx, latent_y: zy })
}

fn per_dim_nll(g: &mut Graph<'_>, z: Var, logdet: Var, dim: f64) -> Result<Var> {
    let prior = gaussian_log_prob(g, z)?;
    let lp = g.add(prior, logdet)?;
    let m = g.mean(lp)?;
    Ok(g.scale(m, -1.0 / dim)?)
}
