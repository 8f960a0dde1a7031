//! Single invertible layers on NCHW tensors.
//!
//! The forward direction maps data toward the latent space. Every layer
//! returns its output together with a per-item log-determinant of the
//! Jacobian of the direction that was applied, so for a bijection `f`,
//! `logdet_forward(x) == -logdet_inverse(f(x))`.

use flowscale_tensor::{Graph, Padding, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// One entry of a flow's layer list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Per-channel affine normalization `y = (x + b)·exp(s)`.
    ActNorm,
    /// Channel mixing by a square matrix at every pixel.
    InvConv,
    /// Affine coupling with a convolutional conditioner of the given width.
    Coupling { hidden: usize },
    /// 2×2 space-to-channel reshuffle.
    Squeeze,
    /// Factor the second half of the channels out to the prior.
    Split,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::ActNorm => "actnorm",
            Layer::InvConv => "invconv",
            Layer::Coupling { .. } => "coupling",
            Layer::Squeeze => "squeeze",
            Layer::Split => "split",
        }
    }

    /// Shape `[C, H, W]` after the layer, or an error if the layer cannot
    /// act on `input`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match self {
            Layer::ActNorm | Layer::InvConv => Ok(input),
            Layer::Coupling { hidden } => {
                if c < 2 || c % 2 != 0 {
                    return Err(FlowError::Architecture(format!("coupling needs an even channel count, got {c}")));
                }
                if *hidden == 0 {
                    return Err(FlowError::Architecture("coupling hidden width must be positive".into()));
                }
                Ok(input)
            }
            Layer::Squeeze => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(FlowError::Architecture(format!("squeeze needs even spatial extents, got {h}×{w}")));
                }
                Ok([4 * c, h / 2, w / 2])
            }
            Layer::Split => {
                if c < 2 || c % 2 != 0 {
                    return Err(FlowError::Architecture(format!("split needs an even channel count, got {c}")));
                }
                Ok([c / 2, h, w])
            }
        }
    }

    /// Parameter suffixes and shapes for a layer acting on `input`.
    pub fn parameter_shapes(&self, input: [usize; 3]) -> Vec<(&'static str, Vec<usize>)> {
        let c = input[0];
        match self {
            Layer::ActNorm => vec![("bias", vec![1, c, 1, 1]), ("logscale", vec![1, c, 1, 1])],
            Layer::InvConv => vec![("weight", vec![c, c])],
            Layer::Coupling { hidden } => {
                let h = *hidden;
                let half = c / 2;
                vec![
                    ("w1", vec![h, half, 3, 3]),
                    ("b1", vec![1, h, 1, 1]),
                    ("w2", vec![h, h, 3, 3]),
                    ("b2", vec![1, h, 1, 1]),
                    ("w3", vec![c, h, 3, 3]),
                    ("b3", vec![1, c, 1, 1]),
                ]
            }
            Layer::Squeeze | Layer::Split => Vec::new(),
        }
    }

    /// Fresh parameter values. Actnorm starts as the identity, the 1×1
    /// convolution as a random rotation, and the coupling's output
    /// convolution at zero.
    pub fn initial_parameters<R: Rng + ?Sized>(&self, input: [usize; 3], rng: &mut R) -> Vec<(&'static str, Tensor)> {
        let c = input[0];
        self.parameter_shapes(input)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = match (self, name) {
                    (Layer::InvConv, _) => random_rotation(c, rng),
                    (Layer::Coupling { .. }, "w1" | "w2") => {
                        (0..n).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect()
                    }
                    _ => vec![0.0; n],
                };
                (name, Tensor::new(shape, data).expect("parameter shape"))
            })
            .collect()
    }
}

/// Gram-Schmidt on a Gaussian matrix, resampled until well conditioned.
pub(crate) fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    'retry: loop {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue 'retry;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
        return rows.concat();
    }
}

fn batch(g: &Graph<'_>, x: Var) -> usize {
    g.shape(x)[0]
}

/// A `[N]` vector holding the same scalar for every item.
fn per_item(g: &mut Graph<'_>, scalar: Var, n: usize) -> Result<Var> {
    let v = g.reshape(scalar, &[1])?;
    Ok(g.broadcast_to(v, &[n])?)
}

pub fn actnorm_apply(g: &mut Graph<'_>, name: &str, x: Var, direction: Direction) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let bias = g.param(&format!("{name}.bias"))?;
    let logscale = g.param(&format!("{name}.logscale"))?;
    let spatial = (shape[2] * shape[3]) as f64;
    let total = g.sum(logscale)?;
    let ld = g.scale(total, spatial)?;
    let ld = per_item(g, ld, shape[0])?;
    match direction {
        Direction::Forward => {
            let scale = g.exp(logscale)?;
            let shifted = g.add(x, bias)?;
            Ok((g.mul(shifted, scale)?, ld))
        }
        Direction::Inverse => {
            let neg = g.neg(logscale)?;
            let inv_scale = g.exp(neg)?;
            let unscaled = g.mul(x, inv_scale)?;
            let y = g.sub(unscaled, bias)?;
            Ok((y, g.neg(ld)?))
        }
    }
}

pub fn invconv_apply(g: &mut Graph<'_>, name: &str, x: Var, direction: Direction) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let c = shape[1];
    let w = g.param(&format!("{name}.weight"))?;
    let lad = g.log_abs_det(w)?;
    let ld = g.scale(lad, (shape[2] * shape[3]) as f64)?;
    let ld = per_item(g, ld, shape[0])?;
    let (kernel, ld) = match direction {
        Direction::Forward => (w, ld),
        Direction::Inverse => (g.inverse(w)?, g.neg(ld)?),
    };
    let kernel = g.reshape(kernel, &[c, c, 1, 1])?;
    Ok((g.conv2d(x, kernel, 1, Padding::Valid)?, ld))
}

/// Conditioner output `(s, t)` for the untouched half `xa`.
fn conditioner(g: &mut Graph<'_>, name: &str, xa: Var, channels: usize) -> Result<(Var, Var)> {
    let mut h = xa;
    for (i, relu) in [(1, true), (2, true), (3, false)] {
        let w = g.param(&format!("{name}.w{i}"))?;
        let b = g.param(&format!("{name}.b{i}"))?;
        let conv = g.conv2d(h, w, 1, Padding::Same)?;
        h = g.add(conv, b)?;
        if relu {
            h = g.relu(h)?;
        }
    }
    let half = channels / 2;
    let s = g.slice(h, 1, 0, half)?;
    let t = g.slice(h, 1, half, half)?;
    Ok((s, t))
}

pub fn coupling_apply(g: &mut Graph<'_>, name: &str, x: Var, direction: Direction) -> Result<(Var, Var)> {
    let c = g.shape(x)[1];
    if c < 2 || c % 2 != 0 {
        return Err(FlowError::Architecture(format!("coupling needs an even channel count, got {c}")));
    }
    let half = c / 2;
    let xa = g.slice(x, 1, 0, half)?;
    let xb = g.slice(x, 1, half, half)?;
    let (s, t) = conditioner(g, name, xa, c)?;
    let shifted = g.add_scalar(s, 2.0)?;
    let log_scale = g.log_sigmoid(shifted)?;
    let ld = g.sum_per_item(log_scale)?;
    let (yb, ld) = match direction {
        Direction::Forward => {
            let scale = g.sigmoid(shifted)?;
            let scaled = g.mul(xb, scale)?;
            (g.add(scaled, t)?, ld)
        }
        Direction::Inverse => {
            let centered = g.sub(xb, t)?;
            let neg_log = g.neg(log_scale)?;
            let inv_scale = g.exp(neg_log)?;
            (g.mul(centered, inv_scale)?, g.neg(ld)?)
        }
    };
    Ok((g.concat(&[xa, yb], 1)?, ld))
}

/// Forward: `[N,C,H,W] → [N,4C,H/2,W/2]` with output channel `c·4 + 2i + j`
/// holding input pixel `(2y + i, 2x + j)` of channel `c`.
pub fn squeeze(g: &mut Graph<'_>, x: Var, direction: Direction) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    match direction {
        Direction::Forward => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(FlowError::Architecture(format!("squeeze needs even spatial extents, got {h}×{w}")));
            }
            let v = g.reshape(x, &[n, c, h / 2, 2, w / 2, 2])?;
            let v = g.permute(v, &[0, 1, 3, 5, 2, 4])?;
            Ok(g.reshape(v, &[n, 4 * c, h / 2, w / 2])?)
        }
        Direction::Inverse => {
            if c % 4 != 0 {
                return Err(FlowError::Architecture(format!("unsqueeze needs a multiple of 4 channels, got {c}")));
            }
            let v = g.reshape(x, &[n, c / 4, 2, 2, h, w])?;
            let v = g.permute(v, &[0, 1, 4, 2, 5, 3])?;
            Ok(g.reshape(v, &[n, c / 4, 2 * h, 2 * w])?)
        }
    }
}

/// Apply one non-split layer; squeeze reports a zero log-determinant.
pub fn layer_apply(g: &mut Graph<'_>, layer: &Layer, name: &str, x: Var, direction: Direction) -> Result<(Var, Var)> {
    match layer {
        Layer::ActNorm => actnorm_apply(g, name, x, direction),
        Layer::InvConv => invconv_apply(g, name, x, direction),
        Layer::Coupling { .. } => coupling_apply(g, name, x, direction),
        Layer::Squeeze => {
            let n = batch(g, x);
            let y = squeeze(g, x, direction)?;
            let zero = g.constant(Tensor::zeros(&[n])?);
            Ok((y, zero))
        }
        Layer::Split => Err(FlowError::NotALayer { index: 0, kind: "split" }),
    }
}
