use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symtrans_core::cemsa::{multi_head_attention, CemsaBlock, CemsaConfig};
use symtrans_core::deform::{jacobian_determinant, DisplacementField};
use symtrans_core::loss::{dice, smoothness_loss, total_loss, warp_labels, LabelMap, LossConfig, RegistrationMode};
use symtrans_core::nn::Conv3d;
use symtrans_core::optim::{adam_step, AdamConfig, AdamState};
use symtrans_core::params::{ParamLayout, ParamStore};
use symtrans_core::synth::{generate_pair, SyntheticSpec};
use symtrans_core::tensor::{inverse_permutation, permute_data};
use symtrans_core::verify::oracle;
use symtrans_core::{ConvSpec, Graph, Result, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

fn eval(inputs: &[&Tensor<f64>], f: impl FnOnce(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).clone()
}

fn grads(x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let loss = f(&mut g, v).unwrap();
    g.backward(loss).unwrap();
    g.grad(v).unwrap()
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Random parameters for `layout`, gammas near 1.
fn random_params(layout: &ParamLayout, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    ParamStore::from_tensors(
        layout
            .specs()
            .iter()
            .map(|s| {
                let base = if s.name.ends_with("gamma") { 1.0 } else { 0.0 };
                Tensor::from_fn(s.shape.clone(), |_| base + r.random_range(-0.5..0.5))
            })
            .collect(),
    )
}

fn label_map(r: &mut ChaCha8Rng, extents: [usize; 3], labels: u32) -> LabelMap {
    let n: usize = extents.iter().product();
    LabelMap::new(extents, (0..n).map(|_| r.random_range(0..=labels)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_probability_vectors(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..30.0) {
        let x = random(&mut rng(seed), &[rows, cols], -spread, spread);
        let y = eval(&[&x], |g, v| g.softmax_lastdim(v[0]));
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn permute_round_trip_preserves_data(seed in any::<u64>(), dims in prop::collection::vec(1usize..5, 1..5)) {
        let mut r = rng(seed);
        let x = random(&mut r, &dims, -1.0, 1.0);
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        perm.shuffle(&mut r);
        let (data, shape) = permute_data(x.data(), x.shape(), &perm);
        prop_assert_eq!(sorted(&data), sorted(x.data()));
        let (back, back_shape) = permute_data(&data, &shape, &inverse_permutation(&perm));
        prop_assert_eq!(&back_shape[..], x.shape());
        prop_assert_eq!(&back[..], x.data());

        let inv = inverse_permutation(&perm);
        let y = eval(&[&x], |g, v| {
            let p = g.permute(v[0], &perm)?;
            g.permute(p, &inv)
        });
        prop_assert_eq!(&y, &x);
    }

    #[test]
    fn reshape_round_trip(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6) {
        let x = random(&mut rng(seed), &[a, b, c], -1.0, 1.0);
        let y = eval(&[&x], |g, v| {
            let flat = g.reshape(v[0], &[a * b * c])?;
            let mid = g.reshape(flat, &[c, a * b])?;
            g.reshape(mid, &[a, b, c])
        });
        prop_assert_eq!(&y, &x);
    }

    #[test]
    fn gradients_are_additive(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut r = rng(seed);
        let x = random(&mut r, &[n, m], -1.0, 1.0);
        let w = random(&mut r, &[m, 3], -1.0, 1.0);
        let f = |g: &mut Graph<f64>, v: Var| -> Result<Var> {
            let wv = g.constant(w.clone());
            let y = g.matmul(v, wv)?;
            let y = g.gelu(y);
            Ok(g.sum(y))
        };
        let h = |g: &mut Graph<f64>, v: Var| -> Result<Var> {
            let y = g.softmax_lastdim(v)?;
            let y = g.mul(y, v)?;
            Ok(g.mean(y))
        };
        let both = grads(&x, |g, v| {
            let a = f(g, v)?;
            let b = h(g, v)?;
            g.add(a, b)
        });
        let (ga, gb) = (grads(&x, f), grads(&x, h));
        for ((s, a), b) in both.data().iter().zip(ga.data()).zip(gb.data()) {
            prop_assert!((s - (a + b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_is_linear_without_bias(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0, stride in 1usize..3, groups in prop::sample::select(vec![1usize, 2])) {
        let mut r = rng(seed);
        let x = random(&mut r, &[2, 5, 5, 5], -1.0, 1.0);
        let y = random(&mut r, &[2, 5, 5, 5], -1.0, 1.0);
        let w = random(&mut r, &[2, 2 / groups, 3, 3, 3], -1.0, 1.0);
        let spec = ConvSpec::new(stride, 1, groups);
        let conv = |t: &Tensor<f64>| eval(&[t, &w], |g, v| g.conv3d(v[0], v[1], None, spec));
        let mix = Tensor::from_fn(x.shape().to_vec(), |i| alpha * x.data()[i] + beta * y.data()[i]);
        let (lhs, cx, cy) = (conv(&mix), conv(&x), conv(&y));
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - (alpha * cx.data()[i] + beta * cy.data()[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_is_translation_equivariant_in_interior(seed in any::<u64>(), axis in 0usize..3, k in prop::sample::select(vec![1usize, 3])) {
        let mut r = rng(seed);
        let n = 7;
        let x = random(&mut r, &[2, n, n, n], -1.0, 1.0);
        let w = random(&mut r, &[3, 2, k, k, k], -1.0, 1.0);
        let idx = |c: usize, p: [usize; 3]| ((c * n + p[0]) * n + p[1]) * n + p[2];
        let shifted = Tensor::from_fn(x.shape().to_vec(), |i| {
            let c = i / (n * n * n);
            let mut p = [(i / (n * n)) % n, (i / n) % n, i % n];
            if p[axis] == 0 {
                return 0.0;
            }
            p[axis] -= 1;
            x.data()[idx(c, p)]
        });
        let spec = ConvSpec::new(1, k / 2, 1);
        let conv = |t: &Tensor<f64>| eval(&[t, &w], |g, v| g.conv3d(v[0], v[1], None, spec));
        let (a, b) = (conv(&x), conv(&shifted));
        let lo = k;
        for c in 0..3 {
            for z in lo..n - lo {
                for y in lo..n - lo {
                    for xx in lo..n - lo {
                        let p = [z, y, xx];
                        let mut q = p;
                        q[axis] -= 1;
                        prop_assert!((b.data()[idx(c, p)] - a.data()[idx(c, q)]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_conv_specialisations(seed in any::<u64>(), c in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut r = rng(seed);
        let x = random(&mut r, &[c, 5, 5, 5], -1.0, 1.0);
        let b = random(&mut r, &[c], -1.0, 1.0);

        let dense_w = random(&mut r, &[c, c, k, k, k], -1.0, 1.0);
        let g1 = eval(&[&x, &dense_w, &b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::new(1, k / 2, 1)));
        prop_assert!(g1.max_abs_diff(&oracle::conv3d(&x, &dense_w, Some(&b), 1, k / 2, 1)).unwrap() <= 1e-12);

        let dw_w = random(&mut r, &[c, 1, k, k, k], -1.0, 1.0);
        let grouped = eval(&[&x, &dw_w, &b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::new(1, k / 2, c)));
        let mut layout = ParamLayout::new();
        let dw = Conv3d::depthwise(&mut layout, "dw", c, k).unwrap();
        let mut g = Graph::new();
        let p = vec![g.constant(dw_w.clone()), g.constant(b.clone())];
        let xv = g.constant(x.clone());
        let out = dw.forward(&mut g, &p, xv).unwrap();
        prop_assert_eq!(g.value(out), &grouped);
    }

    #[test]
    fn attention_weights_are_probability_vectors(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, spread in 0.1f64..5.0) {
        let mut r = rng(seed);
        // With V the identity and one head, the output is the attention matrix itself.
        let q = random(&mut r, &[n, m], -spread, spread);
        let k = random(&mut r, &[m, m], -spread, spread);
        let v = Tensor::from_fn([m, m], |i| if i / m == i % m { 1.0 } else { 0.0 });
        let a = eval(&[&q, &k, &v], |g, x| multi_head_attention(g, x[0], x[1], x[2], 1));
        prop_assert_eq!(a.shape(), &[n, m]);
        for row in a.data().chunks(m) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cemsa_with_zero_weights_is_identity(seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2, 4]), s in prop::sample::select(vec![1usize, 3, 5])) {
        let cfg = CemsaConfig::new(8, heads, s, [3, 2, 3]);
        let mut layout = ParamLayout::new();
        let block = CemsaBlock::new(&mut layout, "b", cfg).unwrap();
        let x = random(&mut rng(seed), &[18, 8], -2.0, 2.0);
        let mut g = Graph::new();
        let p: Vec<Var> = layout
            .specs()
            .iter()
            .map(|sp| g.constant(Tensor::full(sp.shape.clone(), if sp.name.ends_with("gamma") { 1.0 } else { 0.0 })))
            .collect();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &p, xv).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn cemsa_does_not_commute_with_token_permutation(seed in any::<u64>()) {
        let cfg = CemsaConfig::new(8, 2, 3, [3, 3, 3]);
        let mut layout = ParamLayout::new();
        let block = CemsaBlock::new(&mut layout, "b", cfg).unwrap();
        let params = random_params(&layout, seed);
        let mut r = rng(seed ^ 0x5eed);
        let x = random(&mut r, &[27, 8], -1.0, 1.0);
        let mut perm: Vec<usize> = (0..27).collect();
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.shuffle(&mut r);
        }
        let rows = |t: &Tensor<f64>| Tensor::from_fn([27, 8], |i| t.data()[perm[i / 8] * 8 + i % 8]);
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = params.bind_frozen(&mut g);
            let xv = g.constant(t.clone());
            let y = block.forward(&mut g, &p, xv).unwrap();
            prop_assert_eq!(g.value(y).shape(), &[27, 8]);
            Ok(g.value(y).clone())
        };
        let permuted_first = run(&rows(&x))?;
        let permuted_after = rows(&run(&x)?);
        prop_assert!(permuted_first.max_abs_diff(&permuted_after).unwrap() > 1e-6);
    }

    #[test]
    fn dice_is_bounded_symmetric_and_relabelling_invariant(seed in any::<u64>(), labels in 1u32..5) {
        let mut r = rng(seed);
        let e = [4, 5, 3];
        let (a, b) = (label_map(&mut r, e, labels), label_map(&mut r, e, labels));
        let ab = dice(&a, &b, None).unwrap();
        let ba = dice(&b, &a, None).unwrap();
        prop_assert_eq!(&ab, &ba);
        for v in ab.per_label.values() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        if !a.foreground().is_empty() {
            prop_assert_eq!(dice(&a, &a, None).unwrap().mean, Some(1.0));
        }
        let mut ids: Vec<u32> = (1..=labels).collect();
        ids.shuffle(&mut r);
        let relabel = |m: &LabelMap| LabelMap::new(e, m.labels().iter().map(|&l| if l == 0 { 0 } else { ids[l as usize - 1] }).collect()).unwrap();
        let permuted = dice(&relabel(&a), &relabel(&b), None).unwrap();
        // The mean sums labels in id order, so only rounding may differ.
        prop_assert_eq!(permuted.mean.is_some(), ab.mean.is_some());
        prop_assert!((permuted.mean.unwrap_or(0.0) - ab.mean.unwrap_or(0.0)).abs() <= 1e-15);
        for (l, v) in &ab.per_label {
            prop_assert_eq!(permuted.per_label[&ids[*l as usize - 1]], *v);
        }
    }

    #[test]
    fn smoothness_is_translation_invariant(seed in any::<u64>(), shift in prop::array::uniform3(-5.0f64..5.0)) {
        let u = random(&mut rng(seed), &[3, 4, 5, 3], -2.0, 2.0);
        let n = 4 * 5 * 3;
        let moved = Tensor::from_fn(u.shape().to_vec(), |i| u.data()[i] + shift[i / n]);
        let a = eval(&[&u], |g, v| smoothness_loss(g, v[0])).item().unwrap();
        let b = eval(&[&moved], |g, v| smoothness_loss(g, v[0])).item().unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn total_loss_components_are_nonnegative(seed in any::<u64>(), lambda in 0.0f64..1.0, diffeo in any::<bool>()) {
        let mut r = rng(seed);
        let e = [1, 4, 4, 4];
        let (m, f) = (random(&mut r, &e, 0.0, 1.0), random(&mut r, &e, 0.0, 1.0));
        let raw = random(&mut r, &[3, 4, 4, 4], -1.5, 1.5);
        let cfg = LossConfig { lambda, ..Default::default() };
        let mode = if diffeo { RegistrationMode::Diffeomorphic } else { RegistrationMode::Displacement };
        let mut g = Graph::new();
        let (mv, fv, rv) = (g.constant(m), g.constant(f), g.constant(raw));
        let parts = total_loss(&mut g, mv, fv, rv, &cfg, mode).unwrap();
        for v in [parts.loss, parts.sim, parts.reg] {
            prop_assert!(g.value(v).item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn warped_labels_stay_within_input_set(seed in any::<u64>(), labels in 1u32..6, amp in 0.0f64..4.0) {
        let mut r = rng(seed);
        let e = [6, 5, 7];
        let l = label_map(&mut r, e, labels);
        let u = DisplacementField::new(random(&mut r, &[3, 6, 5, 7], -amp, amp + 1e-9)).unwrap();
        let out = warp_labels(&l, &u).unwrap();
        let src: BTreeSet<u32> = l.labels().iter().copied().collect();
        prop_assert!(out.labels().iter().all(|v| src.contains(v)));
    }

    #[test]
    fn adam_first_update_sign_is_loss_scale_invariant(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let x = random(&mut r, &[6], -1.0, 1.0);
        let grad = random(&mut r, &[6], -1.0, 1.0);
        let cfg = AdamConfig { lr: 1e-2, ..Default::default() };
        let update = |c: f64| {
            let mut p = ParamStore::from_tensors(vec![x.clone()]);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &mut st, &[grad.map(|v| v * c)], &cfg).unwrap();
            Tensor::from_fn([6], |i| p.tensors()[0].data()[i] - x.data()[i])
        };
        let (a, b) = (update(1.0), update(scale));
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert_eq!(u.signum(), v.signum());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generated_pairs_never_fold(seed in any::<u64>(), index in 0u64..1000, amplitude in 0.0f64..8.0) {
        let spec = SyntheticSpec {
            extents: [16, 16, 16],
            radius: [3.0, 5.0],
            smoothing: 3.0,
            amplitude,
            ..Default::default()
        };
        // Refusing after the retry budget is allowed; emitting a folded field is not.
        if let Ok(pair) = generate_pair(&spec, seed, index) {
            prop_assert_eq!(jacobian_determinant(&pair.u_true).unwrap().stats.count, 0);
        }
    }
}
