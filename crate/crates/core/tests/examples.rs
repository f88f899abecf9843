use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symtrans_core::deform::{compose_fields, jacobian_determinant, DisplacementField};
use symtrans_core::gradcheck::{grad_check, GradCheckConfig, GraphFn};
use symtrans_core::loss::{LossConfig, RegistrationMode};
use symtrans_core::model::{make_ablation, ModelConfig, Placement, SymTrans};
use symtrans_core::nn::{volume_to_tokens, Conv3d};
use symtrans_core::optim::{adam_step, AdamConfig, AdamState};
use symtrans_core::params::{ParamLayout, ParamStore};
use symtrans_core::synth::{gaussian_blur, Boundary};
use symtrans_core::train::{pair_tensors, register, TrainConfig, Trainer};
use symtrans_core::verify::oracle;
use symtrans_core::{Graph, Result, Scalar, Tensor, Var};

fn eval(inputs: &[&Tensor<f64>], f: impl FnOnce(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).clone()
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

#[test]
fn softmax_of_one_two_three() {
    let x = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = eval(&[&x], |g, v| g.softmax_lastdim(v[0]));
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    for (i, p) in y.data().iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
    assert!((y.data()[0] - 0.09003057317038046).abs() < 1e-12);
}

#[test]
fn matmul_five_by_seven_by_three() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (random(&mut r, &[5, 7]), random(&mut r, &[7, 3]));
    let y = eval(&[&a, &b], |g, v| g.matmul(v[0], v[1]));
    assert_eq!(y.shape(), &[5, 3]);
    assert!(y.max_abs_diff(&oracle::matmul(&a, &b)).unwrap() < 1e-12);
}

#[test]
fn box_kernel_on_constant_volume() {
    let (c, w) = (2.5f64, 0.3f64);
    let mut layout = ParamLayout::new();
    let conv = Conv3d::depthwise(&mut layout, "dw", 2, 3).unwrap();
    let mut g = Graph::new();
    let p = vec![g.constant(Tensor::full([2, 1, 3, 3, 3], w)), g.constant(Tensor::zeros([2]))];
    let x = g.constant(Tensor::full([2, 6, 6, 6], c));
    let y = conv.forward(&mut g, &p, x).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[2, 6, 6, 6]);
    for ch in 0..2 {
        for z in 1..5 {
            for yy in 1..5 {
                for xx in 1..5 {
                    let v = out.data()[((ch * 6 + z) * 6 + yy) * 6 + xx];
                    assert!((v - c * 27.0 * w).abs() < 1e-12);
                }
            }
        }
    }
}

struct RampWarp {
    weights: Tensor<f64>,
}

impl GraphFn for RampWarp {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Var> {
        let y = g.warp(inputs[0], inputs[1])?;
        let r = g.constant(self.weights.cast());
        let y = g.mul(y, r)?;
        Ok(g.sum(y))
    }
}

#[test]
fn half_voxel_shift_of_a_ramp() {
    let n = 6;
    let img = Tensor::from_fn([1, n, n, n], |i| (i % n) as f64);
    let vol = n * n * n;
    let u = Tensor::from_fn([3, n, n, n], |i| if i / vol == 2 { 0.5 } else { 0.0 });
    let out = eval(&[&img, &u], |g, v| g.warp(v[0], v[1]));
    for (i, v) in out.data().iter().enumerate() {
        let w = i % n;
        if w + 1 < n {
            assert!((v - (w as f64 + 0.5)).abs() < 1e-12);
        }
    }
    let f = RampWarp {
        weights: Tensor::from_fn([1, n, n, n], |i| (0.37 * i as f64).sin() + 0.2),
    };
    let cfg = GradCheckConfig::default();
    assert!(grad_check::<f32, _>(&f, &[img.clone(), u.clone()], &cfg).unwrap().passes(1e-4));
    assert!(grad_check::<f64, _>(&f, &[img, u], &cfg).unwrap().passes(1e-6));
}

#[test]
fn patch_embedding_of_an_eight_cube() {
    let cfg = ModelConfig {
        input_shape: [16, 16, 16],
        ..ModelConfig::desk()
    };
    let model = SymTrans::new(&cfg).unwrap();
    let store = model.layout.initialize::<f64, _>(&mut ChaCha8Rng::seed_from_u64(2));
    let embed = match &model.encoder[0].down {
        symtrans_core::model::Downsample::PatchEmbed(c) => *c,
        other => panic!("expected a patch embedding, got {:?}", other),
    };
    assert_eq!((embed.kernel, embed.spec.stride, embed.spec.padding), (3, 2, 1));
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::from_fn([embed.in_channels, 8, 8, 8], |i| (i as f64 * 0.01).cos()));
    let y = embed.forward(&mut g, &p, x).unwrap();
    let tokens = volume_to_tokens(&mut g, y).unwrap();
    assert_eq!(g.shape(tokens), &[64, embed.out_channels]);
}

#[test]
fn ablations_share_output_shape() {
    let base = ModelConfig {
        input_shape: [16, 16, 16],
        ..ModelConfig::desk()
    };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random(&mut r, &[1, 16, 16, 16]).cast::<f32>(), random(&mut r, &[1, 16, 16, 16]).cast::<f32>());
    for placement in Placement::ALL {
        let model = SymTrans::new(&make_ablation(&base, placement)).unwrap();
        let store = model.layout.initialize::<f32, _>(&mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let (m, f) = (g.constant(a.clone()), g.constant(b.clone()));
        let u = model.forward(&mut g, &p, m, f).unwrap();
        assert_eq!(g.shape(u), &[3, 16, 16, 16], "{}", placement.name());
        assert!(g.value(u).is_finite());
    }
}

#[test]
fn adam_matches_scalar_oracle_on_squared_norm() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..Default::default()
    };
    let mut params = ParamStore::from_tensors(vec![Tensor::new([2], vec![1.0f64, 1.0]).unwrap()]);
    let mut state = AdamState::new(&params);
    for _ in 0..10 {
        let mut g = Graph::new();
        let x = params.bind(&mut g)[0];
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        adam_step(&mut params, &mut state, &[grad], &cfg).unwrap();
    }

    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g = 2.0 * x;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    assert_eq!(state.step, 10);
    for p in params.tensors()[0].data() {
        assert!((p - x).abs() < 1e-10, "{} vs {}", p, x);
    }
}

fn smooth(seed: u64, n: usize, peak: f64) -> DisplacementField<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let vol = n * n * n;
    let mut data = Vec::with_capacity(3 * vol);
    for _ in 0..3 {
        let noise: Vec<f64> = (0..vol).map(|_| r.random_range(-1.0..1.0)).collect();
        data.extend(gaussian_blur(&noise, [n, n, n], 2.5, Boundary::Clamp));
    }
    let m = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    DisplacementField::new(Tensor::new([3, n, n, n], data.into_iter().map(|v| v * peak / m).collect()).unwrap()).unwrap()
}

#[test]
fn composition_of_small_smooth_fields_has_positive_jacobian() {
    let n = 14;
    for seed in 0..4 {
        let (a, b) = (smooth(2 * seed, n, 1.0), smooth(2 * seed + 1, n, 1.0));
        let (ja, jb) = (jacobian_determinant(&a).unwrap(), jacobian_determinant(&b).unwrap());
        let jc = jacobian_determinant(&compose_fields(&a, &b).unwrap()).unwrap();
        let mut checked = 0;
        for z in 1..n - 1 {
            for y in 1..n - 1 {
                for x in 1..n - 1 {
                    let i = (z * n + y) * n + x;
                    if ja.det.data()[i] > 0.0 && jb.det.data()[i] > 0.0 {
                        assert!(jc.det.data()[i] > 0.0, "seed {} voxel {:?}", seed, (z, y, x));
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn registering_an_image_to_itself_after_training() {
    let mut cfg = TrainConfig::default();
    cfg.model.input_shape = [16, 16, 16];
    cfg.data.extents = [16, 16, 16];
    cfg.data.radius = [3.0, 5.0];
    cfg.data.smoothing = 3.0;
    cfg.data.amplitude = 2.0;
    cfg.optimizer.lr = 3e-3;
    cfg.iterations = 30;
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    t.train(|_, _| Ok(())).unwrap();

    let pair = t.pair(10_000).unwrap();
    let (moving, fixed) = pair_tensors::<f32>(&pair);
    let baseline = moving.data().iter().zip(fixed.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / moving.len() as f64;
    for mode in [RegistrationMode::Displacement, RegistrationMode::Diffeomorphic] {
        let reg = register(&t.model, &t.state.params, &moving, &moving, mode, &LossConfig::default()).unwrap();
        assert!(reg.loss_sim < 0.25 * baseline, "{:?}: {} vs pair mse {}", mode, reg.loss_sim, baseline);
        assert!((reg.displacement.tensor().max_abs() as f64) < 1.0, "{:?}", mode);
    }
    let disp = register(&t.model, &t.state.params, &moving, &fixed, RegistrationMode::Displacement, &LossConfig::default()).unwrap();
    let diff = register(&t.model, &t.state.params, &moving, &fixed, RegistrationMode::Diffeomorphic, &LossConfig::default()).unwrap();
    assert_eq!(disp.raw_field, diff.raw_field);
}
