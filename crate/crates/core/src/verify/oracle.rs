//! Brute-force 64-bit reference implementations.
//!
//! Written as plain nested loops over explicit indices, sharing no code with the
//! kernels they check.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

fn at4(t: &Tensor<f64>, c: usize, z: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((c * s[1] + z) * s[2] + y) * s[3] + x]
}

/// Zero-padded grouped convolution of `[C, D, H, W]` with `[O, C/g, k, k, k]`.
pub fn conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<f64> {
    let (cin, xd, xh, xw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, ipg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let opg = cout / groups;
    assert_eq!(ipg * groups, cin);
    let out_len = |n: usize| (n + 2 * padding - k) / stride + 1;
    let (od, oh, ow) = (out_len(xd), out_len(xh), out_len(xw));
    let mut out = vec![0.0; cout * od * oh * ow];
    let wd = w.data();
    for co in 0..cout {
        let grp = co / opg;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..ipg {
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iz = (z * stride + kd) as isize - padding as isize;
                                    let iy = (y * stride + kh) as isize - padding as isize;
                                    let ix = (xx * stride + kw) as isize - padding as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= xd as isize || iy >= xh as isize || ix >= xw as isize {
                                        continue;
                                    }
                                    let wv = wd[(((co * ipg + ci) * k + kd) * k + kh) * k + kw];
                                    acc += wv * at4(x, grp * ipg + ci, iz as usize, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[((co * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([cout, od, oh, ow], out).expect("oracle shape")
}

/// Transposed convolution with kernel == stride, weight `[C, O, k, k, k]`.
pub fn conv_transpose3d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (cin, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let (od, oh, ow) = (d * k, h * k, wd * k);
    let mut out = vec![0.0; cout * od * oh * ow];
    for co in 0..cout {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        let (a, bb, c) = (z % k, y % k, xx % k);
                        let wv = w.data()[(((ci * cout + co) * k + a) * k + bb) * k + c];
                        acc += wv * at4(x, ci, z / k, y / k, xx / k);
                    }
                    out[((co * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([cout, od, oh, ow], out).expect("oracle shape")
}

/// `a · b` for `[m, k] × [k, n]`.
pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.data()[i * k + l] * b.data()[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new([m, n], out).expect("oracle shape")
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per head `softmax(q kᵀ / √d_k) v`, heads concatenated on channels.
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dk = d / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..dk).map(|c| q.data()[i * d + h * dk + c] * k.data()[j * d + h * dk + c]).sum::<f64>() * scale)
                .collect();
            let p = softmax(&scores);
            for c in 0..dk {
                out[i * d + h * dk + c] = (0..m).map(|j| p[j] * v.data()[j * d + h * dk + c]).sum();
            }
        }
    }
    Tensor::new([n, d], out).expect("oracle shape")
}

/// Trilinear sample of every channel at `(z, y, x)`, each coordinate clamped to the volume.
pub fn trilinear(img: &Tensor<f64>, point: [f64; 3]) -> Vec<f64> {
    let s = img.shape();
    let dims = [s[1], s[2], s[3]];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let q = point[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = libm::floor(q);
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = q - f;
    }
    (0..s[0])
        .map(|c| {
            let mut acc = 0.0;
            for corner in 0..8 {
                let mut weight = 1.0;
                let mut idx = [0usize; 3];
                for a in 0..3 {
                    let upper = (corner >> (2 - a)) & 1 == 1;
                    idx[a] = if upper { hi[a] } else { lo[a] };
                    weight *= if upper { t[a] } else { 1.0 - t[a] };
                }
                if weight != 0.0 {
                    acc += weight * at4(img, c, idx[0], idx[1], idx[2]);
                }
            }
            acc
        })
        .collect()
}

fn displaced(field: &Tensor<f64>, z: usize, y: usize, x: usize) -> [f64; 3] {
    [
        z as f64 + at4(field, 0, z, y, x),
        y as f64 + at4(field, 1, z, y, x),
        x as f64 + at4(field, 2, z, y, x),
    ]
}

/// `out(p) = img(p + u(p))`.
pub fn warp(img: &Tensor<f64>, field: &Tensor<f64>) -> Tensor<f64> {
    let s = img.shape().to_vec();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; c * d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = trilinear(img, displaced(field, z, y, x));
                for (ch, val) in v.into_iter().enumerate() {
                    out[((ch * d + z) * h + y) * w + x] = val;
                }
            }
        }
    }
    Tensor::new(s, out).expect("oracle shape")
}

/// Displacement of `x ↦ φ_a(φ_b(x))`: `b(p) + a(p + b(p))`.
pub fn compose(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = b.shape().to_vec();
    let (d, h, w) = (s[1], s[2], s[3]);
    let mut out = vec![0.0; 3 * d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let sa = trilinear(a, displaced(b, z, y, x));
                for ch in 0..3 {
                    out[((ch * d + z) * h + y) * w + x] = at4(b, ch, z, y, x) + sa[ch];
                }
            }
        }
    }
    Tensor::new(s, out).expect("oracle shape")
}

/// Per-token layer norm with `ε = 1e-5`.
pub fn layer_norm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + 1e-5);
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    Tensor::new([n, d], out).expect("oracle shape")
}
