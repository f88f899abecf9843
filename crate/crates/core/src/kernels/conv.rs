//! Direct-loop 3D convolution kernels on `[C, D, H, W]` buffers.
//!
//! Loops run kernel offsets outermost so each weight is loaded once per
//! output row; the innermost loop is a contiguous multiply-add over the
//! valid output columns. Accumulation order is fixed, so results do not
//! depend on how the caller schedules work.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Static description of a (possibly grouped, strided, padded) 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// Output extent along one axis, or `None` when the kernel does not fit.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if stride == 0 || span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel * self.kernel * self.kernel
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// For kernel offset `k` along `axis`, the output index range whose input tap is in bounds.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let n_in = self.input[axis] as isize;
        let n_out = self.output[axis] as isize;
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // need 0 <= o*s + off <= n_in - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_num = n_in - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(n_out);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn ranges(&self) -> [Vec<(usize, usize)>; 3] {
        let r = |axis| (0..self.kernel).map(|k| self.valid_range(axis, k)).collect();
        [r(0), r(1), r(2)]
    }
}

/// Visits every (output index, input index) tap for one (weight, input-channel, output-channel)
/// triple: `f(out_row_start, in_row_start, len)` describes a contiguous output run whose input
/// samples are `in_row_start + j * stride`.
#[inline]
fn for_each_row(
    geo: &ConvGeometry,
    ranges: &[Vec<(usize, usize)>; 3],
    kd: usize,
    kh: usize,
    kw: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [_, ih_n, iw_n] = geo.input;
    let [_, oh_n, ow_n] = geo.output;
    let s = geo.stride;
    let p = geo.padding;
    let (d_lo, d_hi) = ranges[0][kd];
    let (h_lo, h_hi) = ranges[1][kh];
    let (w_lo, w_hi) = ranges[2][kw];
    if d_lo >= d_hi || h_lo >= h_hi || w_lo >= w_hi {
        return;
    }
    let len = w_hi - w_lo;
    for od in d_lo..d_hi {
        let id = od * s + kd - p;
        for oh in h_lo..h_hi {
            let ih = oh * s + kh - p;
            let o = (od * oh_n + oh) * ow_n + w_lo;
            let i = (id * ih_n + ih) * iw_n + w_lo * s + kw - p;
            f(o, i, len);
        }
    }
}

pub fn conv3d_forward<S: Scalar>(x: &[S], w: &[S], b: Option<&[S]>, geo: &ConvGeometry) -> Vec<S> {
    let out_vol = geo.out_volume();
    let in_vol = geo.in_volume();
    let k = geo.kernel;
    let k3 = k * k * k;
    let ipg = geo.in_per_group();
    let opg = geo.out_per_group();
    let s = geo.stride;
    let ranges = geo.ranges();
    let mut out = vec![S::zero(); geo.out_channels * out_vol];
    for co in 0..geo.out_channels {
        let group = co / opg;
        let out_c = &mut out[co * out_vol..(co + 1) * out_vol];
        if let Some(b) = b {
            out_c.iter_mut().for_each(|v| *v = b[co]);
        }
        for cl in 0..ipg {
            let ci = group * ipg + cl;
            let x_c = &x[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * ipg + cl) * k3;
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w[w_base + (kd * k + kh) * k + kw];
                        for_each_row(geo, &ranges, kd, kh, kw, |o, i, len| {
                            let dst = &mut out_c[o..o + len];
                            if s == 1 {
                                for (d, &xv) in dst.iter_mut().zip(&x_c[i..i + len]) {
                                    *d += wv * xv;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * x_c[i + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a conv3d with respect to its input, weight and bias.
pub struct ConvGrads<S> {
    pub input: Option<Vec<S>>,
    pub weight: Option<Vec<S>>,
    pub bias: Option<Vec<S>>,
}

pub fn conv3d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    geo: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<S> {
    let out_vol = geo.out_volume();
    let in_vol = geo.in_volume();
    let k = geo.kernel;
    let k3 = k * k * k;
    let ipg = geo.in_per_group();
    let opg = geo.out_per_group();
    let s = geo.stride;
    let ranges = geo.ranges();
    let mut gx = need[0].then(|| vec![S::zero(); geo.in_channels * in_vol]);
    let mut gw = need[1].then(|| vec![S::zero(); geo.weight_len()]);
    let gb = need[2].then(|| {
        (0..geo.out_channels)
            .map(|co| gout[co * out_vol..(co + 1) * out_vol].iter().copied().sum())
            .collect()
    });
    if gx.is_none() && gw.is_none() {
        return ConvGrads { input: None, weight: None, bias: gb };
    }
    for co in 0..geo.out_channels {
        let group = co / opg;
        let g_c = &gout[co * out_vol..(co + 1) * out_vol];
        for cl in 0..ipg {
            let ci = group * ipg + cl;
            let w_base = (co * ipg + cl) * k3;
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let widx = w_base + (kd * k + kh) * k + kw;
                        if let Some(gx) = gx.as_mut() {
                            let wv = w[widx];
                            let gx_c = &mut gx[ci * in_vol..(ci + 1) * in_vol];
                            for_each_row(geo, &ranges, kd, kh, kw, |o, i, len| {
                                let src = &g_c[o..o + len];
                                if s == 1 {
                                    for (d, &gv) in gx_c[i..i + len].iter_mut().zip(src) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (j, &gv) in src.iter().enumerate() {
                                        gx_c[i + j * s] += wv * gv;
                                    }
                                }
                            });
                        }
                        if let Some(gw) = gw.as_mut() {
                            let x_c = &x[ci * in_vol..(ci + 1) * in_vol];
                            let mut acc = S::zero();
                            for_each_row(geo, &ranges, kd, kh, kw, |o, i, len| {
                                let src = &g_c[o..o + len];
                                if s == 1 {
                                    for (&gv, &xv) in src.iter().zip(&x_c[i..i + len]) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for (j, &gv) in src.iter().enumerate() {
                                        acc += gv * x_c[i + j * s];
                                    }
                                }
                            });
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

/// Transposed convolution with kernel == stride and no padding: every input voxel
/// expands into a disjoint `k×k×k` output block. Weight layout `[in, out, k, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposeGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub input: [usize; 3],
}

impl TransposeGeometry {
    pub fn output(&self) -> [usize; 3] {
        self.input.map(|n| n * self.kernel)
    }

    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel.pow(3)
    }
}

pub fn conv_transpose3d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    geo: &TransposeGeometry,
) -> Vec<S> {
    let [d, h, wd] = geo.input;
    let k = geo.kernel;
    let [od, oh, ow] = geo.output();
    let in_vol = d * h * wd;
    let out_vol = od * oh * ow;
    let k3 = k * k * k;
    let mut out = vec![S::zero(); geo.out_channels * out_vol];
    for co in 0..geo.out_channels {
        let out_c = &mut out[co * out_vol..(co + 1) * out_vol];
        if let Some(b) = b {
            out_c.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..geo.in_channels {
            let x_c = &x[ci * in_vol..(ci + 1) * in_vol];
            let wb = (ci * geo.out_channels + co) * k3;
            for a in 0..k {
                for bb in 0..k {
                    for c in 0..k {
                        let wv = w[wb + (a * k + bb) * k + c];
                        for z in 0..d {
                            for y in 0..h {
                                let row = ((z * k + a) * oh + y * k + bb) * ow + c;
                                let src = &x_c[(z * h + y) * wd..(z * h + y + 1) * wd];
                                for (xi, &xv) in src.iter().enumerate() {
                                    out_c[row + xi * k] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose3d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    geo: &TransposeGeometry,
    need: [bool; 3],
) -> ConvGrads<S> {
    let [d, h, wd] = geo.input;
    let k = geo.kernel;
    let [od, oh, ow] = geo.output();
    let in_vol = d * h * wd;
    let out_vol = od * oh * ow;
    let k3 = k * k * k;
    let mut gx = need[0].then(|| vec![S::zero(); geo.in_channels * in_vol]);
    let mut gw = need[1].then(|| vec![S::zero(); geo.weight_len()]);
    let gb = need[2].then(|| {
        (0..geo.out_channels)
            .map(|co| gout[co * out_vol..(co + 1) * out_vol].iter().copied().sum())
            .collect()
    });
    for co in 0..geo.out_channels {
        let g_c = &gout[co * out_vol..(co + 1) * out_vol];
        for ci in 0..geo.in_channels {
            let wb = (ci * geo.out_channels + co) * k3;
            for a in 0..k {
                for bb in 0..k {
                    for c in 0..k {
                        let widx = wb + (a * k + bb) * k + c;
                        let wv = w[widx];
                        let mut acc = S::zero();
                        for z in 0..d {
                            for y in 0..h {
                                let row = ((z * k + a) * oh + y * k + bb) * ow + c;
                                let base = ci * in_vol + (z * h + y) * wd;
                                for xi in 0..wd {
                                    let gv = g_c[row + xi * k];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[base + xi] += wv * gv;
                                    }
                                    acc += gv * x[base + xi];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}
