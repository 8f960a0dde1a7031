//! Joint and conditional sampling, and spherical latent interpolation.

use flowscale_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::model::{AlignFlowModel, CrossDirection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub count: usize,
    /// Standard deviation of each latent perturbation coordinate.
    pub temperature: f64,
    pub seed: u64,
}

fn standard_normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())?)
}

/// Draw `z ~ N(0, σ²I)` in the shared latent and decode it through both
/// flows, as `(x̃, ỹ)` batches. `temperature` scales the prior draw.
pub fn sample_unconditional(model: &AlignFlowModel, spec: &SamplingSpec) -> Result<(Tensor, Tensor)> {
    if spec.count == 0 {
        return Err(AlignError::Config("sample count must be at least 1".into()));
    }
    if !(spec.temperature >= 0.0) {
        return Err(AlignError::Config(format!("temperature must be nonnegative, got {}", spec.temperature)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = standard_normal(&[spec.count, model.latent_dim()], spec.temperature, &mut rng)?;
    let x = model.flow_x.decode(&model.store, &z)?;
    let y = model.flow_y.decode(&model.store, &z)?;
    Ok((x, y))
}

/// `spec.count` decodings of `f_src(input) + ε_i`, `ε_i ~ N(0, σ²I)`, where
/// `input` is one item `[1, C, H, W]`. At `σ = 0` no noise is drawn and every
/// sample is the deterministic cross map.
pub fn sample_conditional(model: &AlignFlowModel, input: &Tensor, direction: CrossDirection, spec: &SamplingSpec) -> Result<Vec<Tensor>> {
    if !(spec.temperature >= 0.0) {
        return Err(AlignError::Config(format!("temperature must be nonnegative, got {}", spec.temperature)));
    }
    if input.shape().first() != Some(&1) {
        return Err(AlignError::Shape(format!("conditional sampling takes one item, got {:?}", input.shape())));
    }
    let (z, _) = model.source_flow(direction).encode(&model.store, input)?;
    let target = model.target_flow(direction);
    if spec.temperature == 0.0 {
        let y = target.decode(&model.store, &z)?;
        return Ok(vec![y; spec.count]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eps = standard_normal(&[spec.count, z.numel()], spec.temperature, &mut rng)?;
    let zs = eps.zip_with(&z, "add", |e, z| e + z)?;
    let decoded = target.decode(&model.store, &zs)?;
    (0..spec.count).map(|i| Ok(decoded.slice_axis(0, i, 1)?)).collect()
}

/// Spherical interpolation on the flattened vectors, falling back to linear
/// interpolation when the angle is below 1e-6.
pub fn slerp(z1: &Tensor, z2: &Tensor, mu: f64) -> Result<Tensor> {
    if z1.shape() != z2.shape() {
        return Err(AlignError::Shape(format!("slerp endpoints {:?} vs {:?}", z1.shape(), z2.shape())));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(AlignError::Config(format!("interpolation fraction {mu} outside [0, 1]")));
    }
    let n1 = z1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = z2.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(AlignError::Config("slerp endpoint has zero norm".into()));
    }
    if mu == 0.0 {
        return Ok(z1.clone());
    }
    if mu == 1.0 {
        return Ok(z2.clone());
    }
    let dot: f64 = z1.data().iter().zip(z2.data()).map(|(a, b)| a * b).sum();
    let theta = (dot / (n1 * n2)).clamp(-1.0, 1.0).acos();
    let (a, b) = if theta < 1e-6 {
        (1.0 - mu, mu)
    } else {
        let s = theta.sin();
        (((1.0 - mu) * theta).sin() / s, (mu * theta).sin() / s)
    };
    Ok(z1.zip_with(z2, "slerp", |p, q| a * p + b * q)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSpec {
    /// Fractions in `[0, 1]`, sorted ascending.
    pub fractions: Vec<f64>,
}

impl InterpolationSpec {
    pub fn evenly(steps: usize) -> Self {
        let fractions = match steps {
            0 => Vec::new(),
            1 => vec![0.0],
            n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        };
        InterpolationSpec { fractions }
    }
}

/// One step of a latent interpolation between two Y-domain items.
#[derive(Clone, Debug)]
pub struct InterpolationFrame {
    pub fraction: f64,
    pub latent: Tensor,
    pub y: Tensor,
    pub x: Tensor,
}

/// Encode `y1, y2` (each `[1, C, H, W]`) with `f_Y`, Slerp the latents at
/// each fraction and decode through both flows.
pub fn interpolate(model: &AlignFlowModel, y1: &Tensor, y2: &Tensor, spec: &InterpolationSpec) -> Result<Vec<InterpolationFrame>> {
    if spec.fractions.windows(2).any(|w| w[0] > w[1]) || spec.fractions.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(AlignError::Config("interpolation fractions must be sorted within [0, 1]".into()));
    }
    let (z1, _) = model.flow_y.encode(&model.store, y1)?;
    let (z2, _) = model.flow_y.encode(&model.store, y2)?;
    let mut frames = Vec::with_capacity(spec.fractions.len());
    for &mu in &spec.fractions {
        let z = slerp(&z1, &z2, mu)?;
        let mut g = Graph::inference(&model.store);
        let zv = g.input(z.clone());
        let (y, _) = model.flow_y.inverse(&mut g, zv)?;
        let (x, _) = model.flow_x.inverse(&mut g, zv)?;
        frames.push(InterpolationFrame { fraction: mu, latent: z, y: g.value(y).clone(), x: g.value(x).clone() });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::from_vec(xs.to_vec()).unwrap()
    }

    #[test]
    fn orthogonal_midpoint() {
        let m = slerp(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.data()[0] - h).abs() < 1e-12 && (m.data()[1] - h).abs() < 1e-12);
    }

    #[test]
    fn endpoints_exact() {
        let a = v(&[0.3, -1.2, 2.0]);
        let b = v(&[1.0, 0.5, -0.7]);
        assert_eq!(slerp(&a, &b, 0.0).unwrap().data(), a.data());
        assert_eq!(slerp(&a, &b, 1.0).unwrap().data(), b.data());
    }

    #[test]
    fn collinear_falls_back_to_linear() {
        let m = slerp(&v(&[1.0, 1.0]), &v(&[2.0, 2.0]), 0.25).unwrap();
        assert!((m.data()[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(slerp(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 0.5).is_err());
        assert!(slerp(&v(&[1.0, 0.0]), &v(&[1.0, 0.0]), 1.5).is_err());
        assert!(slerp(&v(&[1.0]), &v(&[1.0, 0.0]), 0.5).is_err());
    }

    #[test]
    fn even_fractions() {
        assert_eq!(InterpolationSpec::evenly(3).fractions, vec![0.0, 0.5, 1.0]);
        assert_eq!(InterpolationSpec::evenly(1).fractions, vec![0.0]);
    }
}
