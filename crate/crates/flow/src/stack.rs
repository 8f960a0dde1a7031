//! Composed flows and the Gaussian log-density.

use flowscale_tensor::{linalg, Graph, ParameterStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::layers::{layer_apply, Direction, Layer};

/// Glow builder settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub steps: usize,
    pub hidden: usize,
    /// Squeeze at the start of every level and split between levels. Off for
    /// flat vector data, where levels are plain runs of steps.
    pub multiscale: bool,
}

impl FlowSpec {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FlowSpec { channels, height, width, levels: 3, steps: 8, hidden: 64, multiscale: true }
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut out = Vec::new();
        for level in 0..self.levels {
            if self.multiscale {
                out.push(Layer::Squeeze);
            }
            for _ in 0..self.steps {
                out.push(Layer::ActNorm);
                out.push(Layer::InvConv);
                out.push(Layer::Coupling { hidden: self.hidden });
            }
            if self.multiscale && level + 1 < self.levels {
                out.push(Layer::Split);
            }
        }
        out
    }
}

/// An ordered list of invertible layers acting on `[C, H, W]` items, with
/// parameters living in a [`ParameterStore`] under `prefix`.
///
/// `forward` maps data to a flat latent `[N, D]`: the channels factored out at
/// each split in order, then the output of the last layer, each flattened
/// row-major per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    pub prefix: String,
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    /// Set once actnorm layers have seen their first batch.
    pub initialized: bool,
}

/// Log-density of a standard isotropic Gaussian, per item of `z: [N, D]`.
pub fn gaussian_log_prob(g: &mut Graph<'_>, z: Var) -> Result<Var> {
    let d: usize = g.shape(z)[1..].iter().product();
    let sq = g.square(z)?;
    let s = g.sum_per_item(sq)?;
    let s = g.scale(s, -0.5)?;
    Ok(g.add_scalar(s, -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())?)
}

impl FlowStack {
    pub fn glow(prefix: impl Into<String>, spec: &FlowSpec) -> Result<Self> {
        if spec.levels == 0 || spec.steps == 0 {
            return Err(FlowError::Architecture("levels and steps must be positive".into()));
        }
        FlowStack::from_layers(prefix, [spec.channels, spec.height, spec.width], spec.layers())
    }

    pub fn from_layers(prefix: impl Into<String>, input: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input.contains(&0) {
            return Err(FlowError::Architecture(format!("input extents must be positive, got {input:?}")));
        }
        let stack = FlowStack { prefix: prefix.into(), input, layers, initialized: false };
        stack.shapes()?;
        Ok(stack)
    }

    /// Input shape of every layer, then the shape after the last one.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut out = vec![self.input];
        for layer in &self.layers {
            let next = layer.output_shape(*out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.input.iter().product()
    }

    pub fn layer_name(&self, index: usize) -> String {
        format!("{}{}.{}", self.prefix, index, self.layers[index].kind())
    }

    /// Insert freshly initialized parameters for every layer.
    pub fn init_parameters<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let shapes = self.shapes()?;
        for (i, layer) in self.layers.iter().enumerate() {
            let name = self.layer_name(i);
            for (suffix, value) in layer.initial_parameters(shapes[i], rng) {
                store.insert(format!("{name}.{suffix}"), value)?;
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [n, c, h, w] if [*c, *h, *w] == self.input && *n > 0 => Ok(*n),
            _ => {
                let mut expected = vec![0];
                expected.extend(self.input);
                Err(FlowError::Signature { expected, got: shape.to_vec() })
            }
        }
    }

    /// Apply layer `index` to `x`; splits are rejected.
    pub fn apply_layer(&self, g: &mut Graph<'_>, index: usize, x: Var, direction: Direction) -> Result<(Var, Var)> {
        let layer = &self.layers[index];
        if *layer == Layer::Split {
            return Err(FlowError::NotALayer { index, kind: "split" });
        }
        layer_apply(g, layer, &self.layer_name(index), x, direction)
    }

    /// `x: [N, C, H, W]` to `(z: [N, D], logdet: [N])`, the log-determinant
    /// of the data-to-latent map.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let n = self.check_input(g.shape(x))?;
        let mut logdet = g.constant(Tensor::zeros(&[n])?);
        let mut parts = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if *layer == Layer::Split {
                let c = g.shape(h)[1];
                let out = g.slice(h, 1, c / 2, c / 2)?;
                parts.push(flatten(g, out)?);
                h = g.slice(h, 1, 0, c / 2)?;
            } else {
                let (y, ld) = self.apply_layer(g, i, h, Direction::Forward)?;
                logdet = g.add(logdet, ld)?;
                h = y;
            }
        }
        parts.push(flatten(g, h)?);
        let z = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        Ok((z, logdet))
    }

    /// `z: [N, D]` back to data, with the log-determinant of the
    /// latent-to-data map (the negation of the forward one at the image).
    pub fn inverse(&self, g: &mut Graph<'_>, z: Var) -> Result<(Var, Var)> {
        let shapes = self.shapes()?;
        let d = self.dim();
        let n = match g.shape(z) {
            [n, dz] if *dz == d && *n > 0 => *n,
            other => return Err(FlowError::Signature { expected: vec![0, d], got: other.to_vec() }),
        };
        let last = *shapes.last().expect("nonempty");
        let mut end = d;
        let mut take = |g: &mut Graph<'_>, shape: [usize; 3]| -> Result<Var> {
            let len: usize = shape.iter().product();
            end -= len;
            let part = g.slice(z, 1, end, len)?;
            Ok(g.reshape(part, &[n, shape[0], shape[1], shape[2]])?)
        };
        let mut h = take(g, last)?;
        let mut logdet = g.constant(Tensor::zeros(&[n])?);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if *layer == Layer::Split {
                let [c, hh, ww] = shapes[i];
                let out = take(g, [c - c / 2, hh, ww])?;
                h = g.concat(&[h, out], 1)?;
            } else {
                let (y, ld) = self.apply_layer(g, i, h, Direction::Inverse)?;
                logdet = g.add(logdet, ld)?;
                h = y;
            }
        }
        Ok((h, logdet))
    }

    /// Per-item `log p(x) = log N(f(x); 0, I) + log|det ∂f/∂x|`.
    pub fn log_prob(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (z, logdet) = self.forward(g, x)?;
        let prior = gaussian_log_prob(g, z)?;
        Ok(g.add(prior, logdet)?)
    }

    /// Tensor-level forward on a no-grad graph.
    pub fn encode(&self, store: &ParameterStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference(store);
        let xv = g.input(x.clone());
        let (z, ld) = self.forward(&mut g, xv)?;
        Ok((g.value(z).clone(), g.value(ld).clone()))
    }

    /// Tensor-level inverse on a no-grad graph.
    pub fn decode(&self, store: &ParameterStore, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let zv = g.input(z.clone());
        let (x, _) = self.inverse(&mut g, zv)?;
        Ok(g.value(x).clone())
    }

    pub fn log_prob_values(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let xv = g.input(x.clone());
        let lp = self.log_prob(&mut g, xv)?;
        Ok(g.value(lp).clone())
    }

    /// Data-dependent actnorm initialization: each actnorm is set so that its
    /// output on `batch` has zero mean and unit variance per channel.
    pub fn initialize(&mut self, store: &mut ParameterStore, batch: &Tensor) -> Result<()> {
        self.check_input(batch.shape())?;
        let mut h = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Split => {
                    let c = h.shape()[1];
                    h = h.slice_axis(1, 0, c / 2)?;
                    continue;
                }
                Layer::ActNorm => {
                    let (mean, std) = channel_moments(&h);
                    let c = mean.len();
                    let name = self.layer_name(i);
                    store.set(&format!("{name}.bias"), Tensor::new(vec![1, c, 1, 1], mean.iter().map(|m| -m).collect())?)?;
                    let logscale = std.iter().map(|s| -s.max(1e-6).ln()).collect();
                    store.set(&format!("{name}.logscale"), Tensor::new(vec![1, c, 1, 1], logscale)?)?;
                }
                _ => {}
            }
            let mut g = Graph::inference(store);
            let x = g.input(h);
            let (y, _) = self.apply_layer(&mut g, i, x, Direction::Forward)?;
            h = g.value(y).clone();
        }
        self.initialized = true;
        Ok(())
    }

    /// Re-jitter any 1×1 convolution whose determinant has collapsed.
    /// Returns the number of matrices that were perturbed.
    pub fn maintain<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<usize> {
        let mut touched = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if *layer != Layer::InvConv {
                continue;
            }
            let name = format!("{}.weight", self.layer_name(i));
            let mut w = store.get(&name).ok_or_else(|| flowscale_tensor::TensorError::UnknownParameter(name.clone()))?.clone();
            let mut changed = false;
            while !well_conditioned(&w) {
                let jittered = w.data().iter().map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
                w = Tensor::new(w.shape().to_vec(), jittered)?;
                changed = true;
            }
            if changed {
                store.set(&name, w)?;
                touched += 1;
            }
        }
        Ok(touched)
    }
}

fn well_conditioned(w: &Tensor) -> bool {
    match linalg::Lu::factor(w) {
        Ok(lu) => lu.log_abs_det().1 > 1e-12f64.ln(),
        Err(_) => false,
    }
}

fn flatten(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d: usize = shape[1..].iter().product();
    Ok(g.reshape(x, &[shape[0], d])?)
}

/// Population mean and standard deviation of every channel of an NCHW batch.
fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = x.data();
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let values = (0..n).flat_map(|b| d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter());
        mean[ch] = values.clone().sum::<f64>() / count;
        var[ch] = values.map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count;
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}
