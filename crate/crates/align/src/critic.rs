//! Wasserstein critics.

use flowscale_tensor::{Graph, Padding, ParameterStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};

/// A critic scores each item of a batch with one real number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Critic {
    /// Strided 3×3 convolutions with leaky relu, ending in a one-channel
    /// patch score map that is averaged per item. No normalization layers,
    /// since the gradient penalty assumes items are scored independently.
    PatchGan { prefix: String, input: [usize; 3], widths: Vec<usize> },
    /// `c(v) = w·vec(v)`.
    Linear { prefix: String, input: [usize; 3] },
}

const LEAK: f64 = 0.2;

impl Critic {
    pub fn patch_gan(prefix: impl Into<String>, input: [usize; 3], widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(AlignError::Config(format!("critic widths must be nonempty and positive, got {widths:?}")));
        }
        if *widths.last().expect("nonempty") != 1 {
            return Err(AlignError::Config("the last critic width must be 1".into()));
        }
        Ok(Critic::PatchGan { prefix: prefix.into(), input, widths })
    }

    pub fn linear(prefix: impl Into<String>, input: [usize; 3]) -> Self {
        Critic::Linear { prefix: prefix.into(), input }
    }

    pub fn input(&self) -> [usize; 3] {
        match self {
            Critic::PatchGan { input, .. } | Critic::Linear { input, .. } => *input,
        }
    }

    pub fn prefix(&self) -> &str {
        match self {
            Critic::PatchGan { prefix, .. } | Critic::Linear { prefix, .. } => prefix,
        }
    }

    pub fn init_parameters<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let mut normal = |shape: Vec<usize>, std: f64| -> Result<Tensor> {
            let n = shape.iter().product();
            Ok(Tensor::new(shape, (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())?)
        };
        match self {
            Critic::PatchGan { prefix, input, widths } => {
                let mut cin = input[0];
                for (i, &w) in widths.iter().enumerate() {
                    let fan_in = (cin * 9) as f64;
                    store.insert(format!("{prefix}{i}.weight"), normal(vec![w, cin, 3, 3], (1.0 / fan_in).sqrt())?)?;
                    store.insert(format!("{prefix}{i}.bias"), Tensor::zeros(&[1, w, 1, 1])?)?;
                    cin = w;
                }
            }
            Critic::Linear { prefix, input } => {
                let d: usize = input.iter().product();
                store.insert(format!("{prefix}weight"), normal(vec![d, 1], (1.0 / d as f64).sqrt())?)?;
            }
        }
        Ok(())
    }

    /// Per-item scores `[N]` for a batch `[N, C, H, W]`.
    pub fn score(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.input() {
            return Err(AlignError::Shape(format!("critic expects [N, {:?}], got {shape:?}", self.input())));
        }
        let n = shape[0];
        match self {
            Critic::PatchGan { prefix, widths, .. } => {
                let mut h = x;
                let last = widths.len() - 1;
                for i in 0..widths.len() {
                    let w = g.param(&format!("{prefix}{i}.weight"))?;
                    let b = g.param(&format!("{prefix}{i}.bias"))?;
                    let stride = if i < last && g.shape(h)[2] > 1 && g.shape(h)[3] > 1 { 2 } else { 1 };
                    let conv = g.conv2d(h, w, stride, Padding::Same)?;
                    h = g.add(conv, b)?;
                    if i < last {
                        h = g.leaky_relu(h, LEAK)?;
                    }
                }
                let patches: usize = g.shape(h)[1..].iter().product();
                let total = g.sum_per_item(h)?;
                Ok(g.scale(total, 1.0 / patches as f64)?)
            }
            Critic::Linear { prefix, .. } => {
                let w = g.param(&format!("{prefix}weight"))?;
                let d = shape[1..].iter().product();
                let flat = g.reshape(x, &[n, d])?;
                let s = g.matmul(flat, w)?;
                Ok(g.reshape(s, &[n])?)
            }
        }
    }
}
