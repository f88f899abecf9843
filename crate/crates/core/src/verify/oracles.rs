//! Implementation-vs-oracle comparisons on random small instances.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cemsa::multi_head_attention;
use crate::deform::compose;
use crate::error::Result;
use crate::graph::{ConvSpec, Graph, Var};
use crate::scalar::Precision;
use crate::tensor::Tensor;
use crate::verify::{oracle, CheckResult, Suite, ORACLE_TOL};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn eval(inputs: &[&Tensor<f64>], f: impl FnOnce(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

fn diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

#[derive(Clone, Copy)]
enum ConvFamily {
    Dense,
    Grouped,
    Depthwise,
}

fn conv_instance(rng: &mut ChaCha8Rng, family: ConvFamily) -> Result<f64> {
    let (cin, cout, groups) = match family {
        ConvFamily::Dense => (rng.random_range(1..=3), rng.random_range(1..=3), 1),
        ConvFamily::Grouped => {
            let g = [2, 4][rng.random_range(0..2)];
            (g * rng.random_range(1..=2), g * rng.random_range(1..=2), g)
        }
        ConvFamily::Depthwise => {
            let c = rng.random_range(1..=4);
            (c, c, c)
        }
    };
    let k = match family {
        ConvFamily::Depthwise => [1, 3, 5][rng.random_range(0..3)],
        _ => [1, 2, 3][rng.random_range(0..3)],
    };
    let stride = rng.random_range(1..=2);
    let padding = match family {
        ConvFamily::Depthwise => k / 2,
        _ => rng.random_range(0..=k / 2 + 1),
    };
    let stride = if matches!(family, ConvFamily::Depthwise) { 1 } else { stride };
    let extents: Vec<usize> = (0..3).map(|_| rng.random_range(k.max(3)..=6)).collect();
    let x = random(rng, &[cin, extents[0], extents[1], extents[2]], -1.0, 1.0);
    let w = random(rng, &[cout, cin / groups, k, k, k], -1.0, 1.0);
    let b = random(rng, &[cout], -1.0, 1.0);
    let got = eval(&[&x, &w, &b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::new(stride, padding, groups)))?;
    Ok(diff(&got, &oracle::conv3d(&x, &w, Some(&b), stride, padding, groups)))
}

fn family(name: &str, instances: usize, mut f: impl FnMut() -> Result<f64>) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let e = f()?;
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    let mut r = CheckResult::bounded(Suite::Oracles, name, Some(Precision::Wide), instances, worst, ORACLE_TOL);
    r.detail = format!("max abs diff over {} random instances", instances);
    Ok(r)
}

/// Brute-force comparisons for convolutions, products, attention and resampling.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    for (name, fam) in [
        ("conv3d_dense", ConvFamily::Dense),
        ("conv3d_grouped", ConvFamily::Grouped),
        ("conv3d_depthwise", ConvFamily::Depthwise),
    ] {
        out.push(family(name, instances, || conv_instance(rng, fam))?);
    }
    out.push(family("conv_transpose3d", instances, || {
        let (cin, cout, k) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
        let n: Vec<usize> = (0..3).map(|_| rng.random_range(1..=4)).collect();
        let x = random(rng, &[cin, n[0], n[1], n[2]], -1.0, 1.0);
        let w = random(rng, &[cin, cout, k, k, k], -1.0, 1.0);
        let b = random(rng, &[cout], -1.0, 1.0);
        let got = eval(&[&x, &w, &b], |g, v| g.conv_transpose3d(v[0], v[1], Some(v[2])))?;
        Ok(diff(&got, &oracle::conv_transpose3d(&x, &w, Some(&b))))
    })?);
    out.push(family("matmul", instances, || {
        let (m, k, n) = (rng.random_range(1..=7), rng.random_range(1..=7), rng.random_range(1..=7));
        let a = random(rng, &[m, k], -1.0, 1.0);
        let b = random(rng, &[k, n], -1.0, 1.0);
        let got = eval(&[&a, &b], |g, v| g.matmul(v[0], v[1]))?;
        Ok(diff(&got, &oracle::matmul(&a, &b)))
    })?);
    out.push(family("layer_norm", instances, || {
        let (n, d) = (rng.random_range(1..=6), rng.random_range(2..=9));
        let x = random(rng, &[n, d], -2.0, 2.0);
        let gamma = random(rng, &[d], -1.5, 1.5);
        let beta = random(rng, &[d], -1.0, 1.0);
        let got = eval(&[&x, &gamma, &beta], |g, v| g.layer_norm(v[0], v[1], v[2]))?;
        Ok(diff(&got, &oracle::layer_norm(&x, gamma.data(), beta.data())))
    })?);
    out.push(family("multi_head_attention", instances, || {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=3);
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let q = random(rng, &[n, d], -2.0, 2.0);
        let k = random(rng, &[m, d], -2.0, 2.0);
        let v = random(rng, &[m, d], -2.0, 2.0);
        let got = eval(&[&q, &k, &v], |g, x| multi_head_attention(g, x[0], x[1], x[2], heads))?;
        Ok(diff(&got, &oracle::attention(&q, &k, &v, heads)))
    })?);
    out.push(family("warp", instances, || {
        let c = rng.random_range(1..=2);
        let n: Vec<usize> = (0..3).map(|_| rng.random_range(2..=6)).collect();
        let img = random(rng, &[c, n[0], n[1], n[2]], -1.0, 1.0);
        // Offsets reach past the border to exercise clamping.
        let u = random(rng, &[3, n[0], n[1], n[2]], -3.0, 3.0);
        let got = eval(&[&img, &u], |g, v| g.warp(v[0], v[1]))?;
        Ok(diff(&got, &oracle::warp(&img, &u)))
    })?);
    out.push(family("compose", instances, || {
        let n: Vec<usize> = (0..3).map(|_| rng.random_range(2..=6)).collect();
        let a = random(rng, &[3, n[0], n[1], n[2]], -2.0, 2.0);
        let b = random(rng, &[3, n[0], n[1], n[2]], -2.0, 2.0);
        let got = eval(&[&a, &b], |g, v| compose(g, v[0], v[1]))?;
        Ok(diff(&got, &oracle::compose(&a, &b)))
    })?);
    Ok(out)
}
