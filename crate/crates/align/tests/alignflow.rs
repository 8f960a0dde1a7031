use flowscale_align::*;
use flowscale_flow::{FlowSpec, FlowStack, Layer};
use flowscale_tensor::{grad_check_params, GradMap, Graph, ParameterStore, Tensor, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SHAPE: [usize; 3] = [1, 2, 2];

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Flows made of one actnorm with the given log-scales, so the forward map
/// multiplies by `exp(logscale)`, and linear critics with the given weights.
fn scaled_model(lx: f64, ly: f64, wx: f64, wy: f64) -> AlignFlowModel {
    let mut fx = FlowStack::from_layers("fx.", SHAPE, vec![Layer::ActNorm]).unwrap();
    let mut fy = FlowStack::from_layers("fy.", SHAPE, vec![Layer::ActNorm]).unwrap();
    fx.initialized = true;
    fy.initialized = true;
    let mut s = ParameterStore::new();
    for (p, l) in [("fx.", lx), ("fy.", ly)] {
        s.insert(format!("{p}0.actnorm.bias"), Tensor::zeros(&[1, 1, 1, 1]).unwrap()).unwrap();
        s.insert(format!("{p}0.actnorm.logscale"), Tensor::new(vec![1, 1, 1, 1], vec![l]).unwrap()).unwrap();
    }
    for (p, w) in [("cx.", wx), ("cy.", wy)] {
        s.insert(format!("{p}weight"), Tensor::new(vec![4, 1], vec![w; 4]).unwrap()).unwrap();
    }
    AlignFlowModel::from_parts(fx, fy, Critic::linear("cx.", SHAPE), Critic::linear("cy.", SHAPE), s).unwrap()
}

fn small_model(seed: u64, critic: Vec<usize>) -> AlignFlowModel {
    let mut flow = FlowSpec::new(1, 4, 4);
    flow.levels = 2;
    flow.steps = 2;
    flow.hidden = 4;
    let mut spec = ModelSpec::new(flow);
    spec.critic_widths = critic;
    let mut m = AlignFlowModel::new(&spec, seed).unwrap();
    // move every parameter off its initial value so no layer is trivial
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = m.store.names().map(String::from).collect();
    for name in names {
        let v = m.store.get(&name).unwrap();
        let data = v.data().iter().map(|x| x + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
        m.store.set(&name, Tensor::new(v.shape().to_vec(), data).unwrap()).unwrap();
    }
    m.flow_x.initialized = true;
    m.flow_y.initialized = true;
    m
}

fn flow_grads(model: &AlignFlowModel, bx: &Tensor, by: &Tensor, lx: f64, ly: f64, part: &str) -> GradMap {
    let mut g = Graph::new(&model.store, Trainable::Prefixes(vec!["fx.".into(), "fy.".into()]));
    let t = generator_terms(&mut g, model, bx, by, lx, ly).unwrap();
    let root = match part {
        "total" => t.total,
        "adv" => g.add(t.adv_x, t.adv_y).unwrap(),
        _ => g.add(t.mle_x, t.mle_y).unwrap(),
    };
    g.param_gradients(root).unwrap()
}

fn flatten(grads: &GradMap) -> Vec<f64> {
    grads.values().flat_map(|t| t.data().iter().copied()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn identity_flows_cross_map_is_identity() {
    let m = scaled_model(0.0, 0.0, 0.0, 0.0);
    let x = Tensor::new(vec![2, 1, 2, 2], vec![1.0, -2.0, 3.5, 0.25, 7.0, 8.0, -9.0, 0.0]).unwrap();
    assert_eq!(m.cross_map(&x, CrossDirection::XToY).unwrap().data(), x.data());
}

#[test]
fn cross_map_composes_forward_then_inverse() {
    // f_X doubles toward the latent, f_Y is the identity
    let m = scaled_model(2f64.ln(), 0.0, 0.0, 0.0);
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
    let y = m.cross_map(&x, CrossDirection::XToY).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
    let back = m.cross_map(&y, CrossDirection::YToX).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
}

#[test]
fn trained_shape_cross_maps_are_mutual_inverses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..5 {
        let m = small_model(seed, vec![2, 1]);
        let x = gaussian(&[3, 1, 4, 4], &mut rng);
        let y = m.cross_map(&x, CrossDirection::XToY).unwrap();
        assert!(m.cross_map(&y, CrossDirection::YToX).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
        let x2 = m.cross_map(&x, CrossDirection::YToX).unwrap();
        assert!(m.cross_map(&x2, CrossDirection::XToY).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
    }
}

#[test]
fn generator_latents_match_encodings_bit_exactly() {
    let m = small_model(3, vec![2, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bx = gaussian(&[2, 1, 4, 4], &mut rng);
    let by = gaussian(&[2, 1, 4, 4], &mut rng);
    let mut g = Graph::inference(&m.store);
    let t = generator_terms(&mut g, &m, &bx, &by, 1.0, 1.0).unwrap();
    let (zx, _) = m.flow_x.encode(&m.store, &bx).unwrap();
    assert_eq!(g.value(t.latent_x).data(), zx.data());
    assert_eq!(g.value(t.fake_y).data(), m.cross_map(&bx, CrossDirection::XToY).unwrap().data());
    assert_eq!(g.value(t.fake_x).data(), m.cross_map(&by, CrossDirection::YToX).unwrap().data());
}

#[test]
fn identity_flows_zero_critics_total_is_weighted_nll() {
    let m = scaled_model(0.0, 0.0, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bx = gaussian(&[4, 1, 2, 2], &mut rng);
    let by = gaussian(&[4, 1, 2, 2], &mut rng);
    let nll = |b: &Tensor| {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        b.data().iter().map(|v| 0.5 * v * v + half_log_2pi).sum::<f64>() / b.numel() as f64
    };
    let cfg = TrainConfig { lambda_x: 0.7, lambda_y: 2.5, ..TrainConfig::default() };
    let r = alignflow_total_loss(&m, &bx, &by, &cfg, 0).unwrap();
    assert_eq!((r.adv_gen_x, r.adv_gen_y), (0.0, 0.0));
    assert!((r.mle_x - nll(&bx)).abs() < 1e-12);
    assert!((r.generator_total - (0.7 * nll(&bx) + 2.5 * nll(&by))).abs() < 1e-12);
}

#[test]
fn lambda_limits() {
    let m = small_model(4, vec![2, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bx = gaussian(&[3, 1, 4, 4], &mut rng);
    let by = gaussian(&[3, 1, 4, 4], &mut rng);
    // λ = 0: the generator gradient is the adversarial gradient
    let total = flow_grads(&m, &bx, &by, 0.0, 0.0, "total");
    let adv = flow_grads(&m, &bx, &by, 0.0, 0.0, "adv");
    let (a, b) = (flatten(&total), flatten(&adv));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0)));
    assert!(b.iter().any(|v| *v != 0.0));
    // λ = 1e6: the update direction is the likelihood direction
    let big = flatten(&flow_grads(&m, &bx, &by, 1e6, 1e6, "total"));
    let mle = flatten(&flow_grads(&m, &bx, &by, 1.0, 1.0, "mle"));
    assert!(cosine(&big, &mle) > 0.999);
    // constant critics: the generator gradient is exactly the likelihood gradient
    let mut frozen = m.clone();
    for name in m.store.names().filter(|n| n.starts_with('c')) {
        let zero = m.store.get(name).unwrap().map(|_| 0.0);
        frozen.store.set(name, zero).unwrap();
    }
    let t = flatten(&flow_grads(&frozen, &bx, &by, 1.0, 1.0, "total"));
    let l = flatten(&flow_grads(&frozen, &bx, &by, 1.0, 1.0, "mle"));
    assert!(t.iter().zip(&l).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0)));
}

#[test]
fn adversarial_gradient_reaches_both_flows() {
    let m = small_model(6, vec![2, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bx = gaussian(&[2, 1, 4, 4], &mut rng);
    let by = gaussian(&[2, 1, 4, 4], &mut rng);
    let g = flow_grads(&m, &bx, &by, 0.0, 0.0, "adv");
    let norm = |p: &str| g.iter().filter(|(k, _)| k.starts_with(p)).flat_map(|(_, t)| t.data().iter()).map(|v| v * v).sum::<f64>();
    assert!(norm("fx.") > 0.0 && norm("fy.") > 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let m = small_model(seed, vec![2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let bx = gaussian(&[2, 1, 4, 4], &mut rng);
        let by = gaussian(&[2, 1, 4, 4], &mut rng);
        let names = ["fx.2.invconv.weight", "fy.3.coupling.w3", "fx.1.actnorm.logscale", "fy.11.coupling.w1"];
        let err = grad_check_params(
            &m.store,
            &names,
            |g| {
                let t = generator_terms(g, &m, &bx, &by, 1.0, 1.0)?;
                Ok::<_, AlignError>(t.total)
            },
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
        let fake = m.cross_map(&by, CrossDirection::YToX).unwrap();
        let u: Vec<f64> = (0..2).map(|_| rng.random()).collect();
        let err = grad_check_params(
            &m.store,
            &["cx.0.weight", "cx.1.weight", "cx.1.bias"],
            |g| Ok::<_, AlignError>(wgan_gp_critic_loss(g, &m.critic_x, &bx, &fake, 10.0, &u)?.total),
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "{worst}");
}

fn bumps(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::with_capacity(n * 16);
    for _ in 0..n {
        let (cy, cx): (f64, f64) = (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0));
        for p in 0..16 {
            let d2 = ((p / 4) as f64 - cy).powi(2) + ((p % 4) as f64 - cx).powi(2);
            v.push((-d2 / 2.0).exp() + 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Tensor::new(vec![n, 1, 4, 4], v).unwrap()
}

fn tiny_config(steps: u64) -> TrainConfig {
    TrainConfig { batch_size: 4, total_steps: steps, critic_ratio: 2, lr_flow: 1e-3, lr_critic: 1e-3, seed: 11, noise_x: 0.01, noise_y: 0.01, init_batch: 16, ..TrainConfig::default() }
}

fn history_bytes(h: &[LossRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_history(&mut buf, h).unwrap();
    buf
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let (x, y) = (bumps(40, 1), bumps(40, 2));
    let run = || {
        let mut m = small_model(1, vec![2, 1]);
        m.flow_x.initialized = false;
        m.flow_y.initialized = false;
        let h = train(&mut m, &x, &y, &tiny_config(6), |_, _| Ok(())).unwrap();
        (history_bytes(&h), m.to_checkpoint().unwrap().encode())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
    let steps: Vec<u64> = read_history(&h1[..]).unwrap().iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
}

#[test]
fn resume_reproduces_next_record() {
    let (x, y) = (bumps(40, 3), bumps(40, 4));
    let cfg = tiny_config(6);
    let mut m = small_model(2, vec![2, 1]);
    let mut saved = None;
    let full = train(&mut m, &x, &y, &cfg, |m, r| {
        if r.step == 2 {
            saved = Some(m.to_checkpoint()?.encode());
        }
        Ok(())
    })
    .unwrap();
    let ckpt = flowscale_tensor::Checkpoint::decode(&saved.unwrap()).unwrap();
    let mut resumed = AlignFlowModel::from_checkpoint(ckpt).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = train(&mut resumed, &x, &y, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(history_bytes(&rest), history_bytes(&full[3..]));
    assert_eq!(resumed.to_checkpoint().unwrap().encode(), m.to_checkpoint().unwrap().encode());
}

#[test]
fn zero_learning_rates_leave_parameters() {
    let (x, y) = (bumps(20, 5), bumps(20, 6));
    let mut m = small_model(5, vec![2, 1]);
    let before: Vec<(String, Tensor)> = m.store.iter().map(|(k, p)| (k.to_string(), p.value.clone())).collect();
    let cfg = TrainConfig { lr_flow: 0.0, lr_critic: 0.0, ..tiny_config(3) };
    let h = train(&mut m, &x, &y, &cfg, |_, _| Ok(())).unwrap();
    assert!(h.iter().all(LossRecord::is_finite));
    for (k, v) in before {
        assert_eq!(m.store.get(&k).unwrap().data(), v.data(), "{k}");
    }
}

#[test]
fn disjoint_domains_train_with_finite_losses() {
    // X items come from one period, Y items from a later one
    let all = bumps(60, 7);
    let x = Tensor::new(vec![30, 1, 4, 4], all.data()[..30 * 16].to_vec()).unwrap();
    let y = Tensor::new(vec![30, 1, 4, 4], all.data()[30 * 16..].to_vec()).unwrap();
    let mut m = small_model(7, vec![2, 1]);
    let h = train(&mut m, &x, &y, &tiny_config(4), |_, _| Ok(())).unwrap();
    assert_eq!(h.len(), 4);
    assert!(h.iter().all(LossRecord::is_finite));
}

#[test]
fn likelihood_training_decreases_loss() {
    // a 2-D two-component mixture, flows of shape [2, 1, 1]
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut sample = |n: usize| {
        let v: Vec<f64> = (0..n)
            .flat_map(|_| {
                let c = if rng.random_bool(0.5) { 2.0 } else { -2.0 };
                [c + 0.5 * rng.sample::<f64, _>(StandardNormal), 0.7 * rng.sample::<f64, _>(StandardNormal)]
            })
            .collect();
        Tensor::new(vec![n, 2, 1, 1], v).unwrap()
    };
    let flow = FlowSpec { channels: 2, height: 1, width: 1, levels: 2, steps: 4, hidden: 16, multiscale: false };
    let mut spec = ModelSpec::new(flow);
    spec.critic_widths = vec![];
    let mut m = AlignFlowModel::new(&spec, 8).unwrap();
    let init = sample(256);
    m.initialize(&init, &init).unwrap();
    let adam = flowscale_tensor::Adam::with_lr(3e-3);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let b = sample(256);
        let mut g = Graph::new(&m.store, Trainable::Prefixes(vec!["fx.".into()]));
        let bv = g.input(b);
        let (nll, _) = mle_loss(&mut g, &m.flow_x, bv).unwrap();
        losses.push(g.value(nll).item().unwrap());
        let grads = g.param_gradients(nll).unwrap();
        adam.step(&mut m.store, &grads).unwrap();
    }
    let windows: Vec<f64> = losses.chunks(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
}
