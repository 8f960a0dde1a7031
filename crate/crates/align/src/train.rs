//! Unpaired training loop.

use std::io::{Read, Write};

use flowscale_tensor::{Adam, GradMap, Graph, Tensor, Trainable};
use log::debug;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::loss::{generator_terms, interpolation_weights, wgan_gp_critic_loss};
use crate::model::{AlignFlowModel, CRITIC_X, CRITIC_Y, FLOW_X, FLOW_Y};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    /// Critic updates per generator update.
    pub critic_ratio: usize,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub lambda_gp: f64,
    pub lr_flow: f64,
    pub lr_critic: f64,
    pub seed: u64,
    /// Amplitude `a` of `U(0, a)` noise added to training items of each
    /// domain before every step.
    pub noise_x: f64,
    pub noise_y: f64,
    /// Items used for data-dependent actnorm initialization.
    pub init_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            total_steps: 2000,
            critic_ratio: 5,
            lambda_x: 1.0,
            lambda_y: 1.0,
            lambda_gp: 10.0,
            lr_flow: 1e-4,
            lr_critic: 1e-4,
            seed: 0,
            noise_x: 0.0,
            noise_y: 0.0,
            init_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_x", self.lambda_x),
            ("lambda_y", self.lambda_y),
            ("lambda_gp", self.lambda_gp),
            ("lr_flow", self.lr_flow),
            ("lr_critic", self.lr_critic),
            ("noise_x", self.noise_x),
            ("noise_y", self.noise_y),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AlignError::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if self.critic_ratio < 1 {
            return Err(AlignError::Config("critic_ratio must be at least 1".into()));
        }
        if self.batch_size < 1 || self.init_batch < 1 {
            return Err(AlignError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the loss history. Likelihood terms are in nats per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub mle_x: f64,
    pub mle_y: f64,
    pub adv_gen_x: f64,
    pub adv_gen_y: f64,
    pub critic_x: f64,
    pub critic_y: f64,
    pub gp_x: f64,
    pub gp_y: f64,
    pub generator_total: f64,
}

impl LossRecord {
    fn nan(step: u64) -> Self {
        LossRecord {
            step,
            mle_x: f64::NAN,
            mle_y: f64::NAN,
            adv_gen_x: f64::NAN,
            adv_gen_y: f64::NAN,
            critic_x: f64::NAN,
            critic_y: f64::NAN,
            gp_x: f64::NAN,
            gp_y: f64::NAN,
            generator_total: f64::NAN,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mle_x,
            self.mle_y,
            self.adv_gen_x,
            self.adv_gen_y,
            self.critic_x,
            self.critic_y,
            self.gp_x,
            self.gp_y,
            self.generator_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Independent purposes draw from independent streams of the step generator.
#[derive(Clone, Copy)]
enum Stream {
    Batch = 0,
    Noise = 1,
    Critic = 2,
    Maintain = 3,
}

/// A generator determined by `(seed, step, purpose)` alone, so a resumed run
/// needs no saved generator state.
fn step_rng(seed: u64, step: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(stream as u64));
    rng
}

/// Evaluate every loss component at the current parameters without
/// updating anything.
pub fn alignflow_total_loss(model: &AlignFlowModel, batch_x: &Tensor, batch_y: &Tensor, config: &TrainConfig, seed: u64) -> Result<LossRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(&model.store, Trainable::Nothing);
    let gen = generator_terms(&mut g, model, batch_x, batch_y, config.lambda_x, config.lambda_y)?;
    let fake_x = g.value(gen.fake_x).clone();
    let fake_y = g.value(gen.fake_y).clone();
    let ux = interpolation_weights(batch_x.shape()[0], &mut rng);
    let uy = interpolation_weights(batch_y.shape()[0], &mut rng);
    let cx = wgan_gp_critic_loss(&mut g, &model.critic_x, batch_x, &fake_x, config.lambda_gp, &ux)?;
    let cy = wgan_gp_critic_loss(&mut g, &model.critic_y, batch_y, &fake_y, config.lambda_gp, &uy)?;
    let v = |g: &Graph<'_>, var| g.value(var).item();
    Ok(LossRecord {
        step: model.step,
        mle_x: v(&g, gen.mle_x)?,
        mle_y: v(&g, gen.mle_y)?,
        adv_gen_x: v(&g, gen.adv_x)?,
        adv_gen_y: v(&g, gen.adv_y)?,
        critic_x: v(&g, cx.total)?,
        critic_y: v(&g, cy.total)?,
        gp_x: v(&g, cx.penalty)?,
        gp_y: v(&g, cy.penalty)?,
        generator_total: v(&g, gen.total)?,
    })
}

fn as_divergence(e: AlignError, record: &LossRecord) -> AlignError {
    match e.numeric_failure() {
        Some(reason) => AlignError::Diverged { record: Box::new(record.clone()), reason },
        None => e,
    }
}

fn check_gradients(grads: &GradMap) -> bool {
    grads.values().all(Tensor::is_finite)
}

/// `critic_ratio` critic updates against fakes from the current flows, then
/// one flow update. The record holds the loss values seen before the last
/// update of each player, and `model.step` advances by one.
pub fn train_step(model: &mut AlignFlowModel, batch_x: &Tensor, batch_y: &Tensor, config: &TrainConfig) -> Result<LossRecord> {
    config.validate()?;
    if batch_x.shape()[0] != batch_y.shape()[0] {
        return Err(AlignError::Shape(format!("batch sizes differ: {:?} vs {:?}", batch_x.shape(), batch_y.shape())));
    }
    let step = model.step;
    let mut record = LossRecord::nan(step);
    let diverged = |record: &LossRecord, reason: String| AlignError::Diverged { record: Box::new(record.clone()), reason };
    let n = batch_x.shape()[0];

    // fakes stay fixed while the critics move, since the flows do not
    let fakes = || -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference(&model.store);
        let xv = g.input(batch_x.clone());
        let yv = g.input(batch_y.clone());
        let (zx, _) = model.flow_x.forward(&mut g, xv)?;
        let (zy, _) = model.flow_y.forward(&mut g, yv)?;
        let (fy, _) = model.flow_y.inverse(&mut g, zx)?;
        let (fx, _) = model.flow_x.inverse(&mut g, zy)?;
        Ok((g.value(fx).clone(), g.value(fy).clone()))
    };
    let (fake_x, fake_y) = fakes().map_err(|e| as_divergence(e, &record))?;

    let critic_adam = Adam::with_lr(config.lr_critic);
    let mut rng = step_rng(config.seed, step, Stream::Critic);
    for _ in 0..config.critic_ratio {
        let ux = interpolation_weights(n, &mut rng);
        let uy = interpolation_weights(n, &mut rng);
        let grads = {
            let mut g = Graph::new(&model.store, Trainable::Prefixes(vec![CRITIC_X.into(), CRITIC_Y.into()]));
            let cx = wgan_gp_critic_loss(&mut g, &model.critic_x, batch_x, &fake_x, config.lambda_gp, &ux).map_err(|e| as_divergence(e, &record))?;
            let cy = wgan_gp_critic_loss(&mut g, &model.critic_y, batch_y, &fake_y, config.lambda_gp, &uy).map_err(|e| as_divergence(e, &record))?;
            record.critic_x = g.value(cx.total).item()?;
            record.critic_y = g.value(cy.total).item()?;
            record.gp_x = g.value(cx.penalty).item()?;
            record.gp_y = g.value(cy.penalty).item()?;
            let total = g.add(cx.total, cy.total)?;
            g.param_gradients(total).map_err(|e| as_divergence(e.into(), &record))?
        };
        if !check_gradients(&grads) {
            return Err(diverged(&record, "non-finite critic gradient".into()));
        }
        critic_adam.step(&mut model.store, &grads)?;
    }

    let grads = {
        let mut g = Graph::new(&model.store, Trainable::Prefixes(vec![FLOW_X.into(), FLOW_Y.into()]));
        let gen = generator_terms(&mut g, model, batch_x, batch_y, config.lambda_x, config.lambda_y).map_err(|e| as_divergence(e, &record))?;
        record.mle_x = g.value(gen.mle_x).item()?;
        record.mle_y = g.value(gen.mle_y).item()?;
        record.adv_gen_x = g.value(gen.adv_x).item()?;
        record.adv_gen_y = g.value(gen.adv_y).item()?;
        record.generator_total = g.value(gen.total).item()?;
        g.param_gradients(gen.total).map_err(|e| as_divergence(e.into(), &record))?
    };
    if !record.is_finite() {
        return Err(diverged(&record, "non-finite loss".into()));
    }
    if !check_gradients(&grads) {
        return Err(diverged(&record, "non-finite flow gradient".into()));
    }
    Adam::with_lr(config.lr_flow).step(&mut model.store, &grads)?;

    let mut rng = step_rng(config.seed, step, Stream::Maintain);
    let jittered = model.flow_x.maintain(&mut model.store, &mut rng)? + model.flow_y.maintain(&mut model.store, &mut rng)?;
    if jittered > 0 {
        debug!("step {step}: re-jittered {jittered} near-singular 1x1 convolutions");
    }
    model.step += 1;
    Ok(record)
}

fn gather(data: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let per: usize = data.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = indices.len();
    Ok(Tensor::new(shape, out)?)
}

fn add_uniform_noise<R: Rng + ?Sized>(t: &Tensor, amplitude: f64, rng: &mut R) -> Result<Tensor> {
    if amplitude == 0.0 {
        return Ok(t.clone());
    }
    let data = t.data().iter().map(|v| v + amplitude * rng.random::<f64>()).collect();
    Ok(Tensor::new(t.shape().to_vec(), data)?)
}

/// Unpaired batches for `step`: items of each domain are drawn
/// independently, without replacement within the batch.
pub fn sample_batches(data_x: &Tensor, data_y: &Tensor, config: &TrainConfig, step: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = step_rng(config.seed, step, Stream::Batch);
    let mut pick = |data: &Tensor| -> Result<Tensor> {
        let t = data.shape()[0];
        let idx = if config.batch_size <= t {
            index::sample(&mut rng, t, config.batch_size).into_vec()
        } else {
            (0..config.batch_size).map(|_| rng.random_range(0..t)).collect()
        };
        gather(data, &idx)
    };
    let bx = pick(data_x)?;
    let by = pick(data_y)?;
    let mut rng = step_rng(config.seed, step, Stream::Noise);
    let bx = add_uniform_noise(&bx, config.noise_x, &mut rng)?;
    let by = add_uniform_noise(&by, config.noise_y, &mut rng)?;
    Ok((bx, by))
}

/// Run steps `model.step..config.total_steps`. X and Y may cover disjoint
/// time ranges. `observer` sees the model and record after every step and
/// can checkpoint or validate; an error from it stops training.
pub fn train<F>(model: &mut AlignFlowModel, data_x: &Tensor, data_y: &Tensor, config: &TrainConfig, mut observer: F) -> Result<Vec<LossRecord>>
where
    F: FnMut(&AlignFlowModel, &LossRecord) -> Result<()>,
{
    config.validate()?;
    for (name, data, flow) in [("X", data_x, &model.flow_x), ("Y", data_y, &model.flow_y)] {
        let s = data.shape();
        if s.len() != 4 || s[0] == 0 || s[1..] != flow.input {
            return Err(AlignError::Shape(format!("{name} data {s:?} does not match flow input {:?}", flow.input)));
        }
    }
    if !model.is_initialized() {
        let init = TrainConfig { batch_size: config.init_batch, ..config.clone() };
        let (bx, by) = sample_batches(data_x, data_y, &init, u64::MAX)?;
        model.initialize(&bx, &by)?;
    }
    let mut history = Vec::new();
    while model.step < config.total_steps {
        let (bx, by) = sample_batches(data_x, data_y, config, model.step)?;
        let record = train_step(model, &bx, &by, config)?;
        observer(model, &record)?;
        history.push(record);
    }
    Ok(history)
}

pub fn write_history<W: Write>(w: W, records: &[LossRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history<R: Read>(r: R) -> Result<Vec<LossRecord>> {
    let mut input = csv::Reader::from_reader(r);
    input.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> AlignError {
    AlignError::Io(std::io::Error::other(e))
}
