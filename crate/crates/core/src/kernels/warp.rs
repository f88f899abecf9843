//! Trilinear resampling `out(p) = img(p + u(p))` with clamp-to-border coordinates.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Interpolation stencil along one axis: lower index, upper index, fraction,
/// and whether the coordinate was clamped (zero derivative).
#[derive(Clone, Copy)]
struct Axis<S> {
    i0: usize,
    i1: usize,
    frac: S,
    clamped: bool,
}

#[inline]
fn axis_stencil<S: Scalar>(q: S, n: usize) -> Axis<S> {
    if n == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            frac: S::zero(),
            clamped: true,
        };
    }
    let hi = S::from_usize(n - 1);
    let (q, clamped) = if q < S::zero() {
        (S::zero(), true)
    } else if q > hi {
        (hi, true)
    } else {
        (q, false)
    };
    let i0 = q.floor().as_f64() as usize;
    let i0 = i0.min(n - 2);
    Axis {
        i0,
        i1: i0 + 1,
        frac: q - S::from_usize(i0),
        clamped,
    }
}

#[inline]
fn stencils<S: Scalar>(field: &[S], dims: [usize; 3], z: usize, y: usize, x: usize) -> [Axis<S>; 3] {
    let vol = dims[0] * dims[1] * dims[2];
    let idx = (z * dims[1] + y) * dims[2] + x;
    [
        axis_stencil(S::from_usize(z) + field[idx], dims[0]),
        axis_stencil(S::from_usize(y) + field[vol + idx], dims[1]),
        axis_stencil(S::from_usize(x) + field[2 * vol + idx], dims[2]),
    ]
}

pub fn warp_forward<S: Scalar>(img: &[S], channels: usize, dims: [usize; 3], field: &[S]) -> Vec<S> {
    let vol = dims[0] * dims[1] * dims[2];
    let mut out = vec![S::zero(); channels * vol];
    let (hn, wn) = (dims[1], dims[2]);
    let one = S::one();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let [a, b, c] = stencils(field, dims, z, y, x);
                let idx = (z * hn + y) * wn + x;
                let corners = corner_indices(&a, &b, &c, hn, wn);
                let weights = corner_weights(a.frac, b.frac, c.frac, one);
                for ch in 0..channels {
                    let src = &img[ch * vol..(ch + 1) * vol];
                    let mut v = S::zero();
                    for (&ci, &wt) in corners.iter().zip(&weights) {
                        v += wt * src[ci];
                    }
                    out[ch * vol + idx] = v;
                }
            }
        }
    }
    out
}

#[inline]
fn corner_indices<S>(a: &Axis<S>, b: &Axis<S>, c: &Axis<S>, hn: usize, wn: usize) -> [usize; 8] {
    let at = |z: usize, y: usize, x: usize| (z * hn + y) * wn + x;
    [
        at(a.i0, b.i0, c.i0),
        at(a.i0, b.i0, c.i1),
        at(a.i0, b.i1, c.i0),
        at(a.i0, b.i1, c.i1),
        at(a.i1, b.i0, c.i0),
        at(a.i1, b.i0, c.i1),
        at(a.i1, b.i1, c.i0),
        at(a.i1, b.i1, c.i1),
    ]
}

#[inline]
fn corner_weights<S: Scalar>(fa: S, fb: S, fc: S, one: S) -> [S; 8] {
    let (ga, gb, gc) = (one - fa, one - fb, one - fc);
    [
        ga * gb * gc,
        ga * gb * fc,
        ga * fb * gc,
        ga * fb * fc,
        fa * gb * gc,
        fa * gb * fc,
        fa * fb * gc,
        fa * fb * fc,
    ]
}

/// Returns (grad wrt image, grad wrt field); each computed only when requested.
pub fn warp_backward<S: Scalar>(
    img: &[S],
    channels: usize,
    dims: [usize; 3],
    field: &[S],
    gout: &[S],
    need: [bool; 2],
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let vol = dims[0] * dims[1] * dims[2];
    let (hn, wn) = (dims[1], dims[2]);
    let one = S::one();
    let mut gimg = need[0].then(|| vec![S::zero(); channels * vol]);
    let mut gfield = need[1].then(|| vec![S::zero(); 3 * vol]);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let [a, b, c] = stencils(field, dims, z, y, x);
                let idx = (z * hn + y) * wn + x;
                let corners = corner_indices(&a, &b, &c, hn, wn);
                if let Some(gimg) = gimg.as_mut() {
                    let weights = corner_weights(a.frac, b.frac, c.frac, one);
                    for ch in 0..channels {
                        let g = gout[ch * vol + idx];
                        let dst = &mut gimg[ch * vol..(ch + 1) * vol];
                        for (&ci, &wt) in corners.iter().zip(&weights) {
                            dst[ci] += wt * g;
                        }
                    }
                }
                if let Some(gfield) = gfield.as_mut() {
                    let (fa, fb, fc) = (a.frac, b.frac, c.frac);
                    let (ga, gb, gc) = (one - fa, one - fb, one - fc);
                    // d weight / d frac along each axis, corner order as in corner_weights
                    let dza = [-gb * gc, -gb * fc, -fb * gc, -fb * fc, gb * gc, gb * fc, fb * gc, fb * fc];
                    let dyb = [-ga * gc, -ga * fc, ga * gc, ga * fc, -fa * gc, -fa * fc, fa * gc, fa * fc];
                    let dxc = [-ga * gb, ga * gb, -ga * fb, ga * fb, -fa * gb, fa * gb, -fa * fb, fa * fb];
                    let mut acc = [S::zero(); 3];
                    for ch in 0..channels {
                        let g = gout[ch * vol + idx];
                        if g == S::zero() {
                            continue;
                        }
                        let src = &img[ch * vol..(ch + 1) * vol];
                        let mut s = [S::zero(); 3];
                        for (j, &ci) in corners.iter().enumerate() {
                            let v = src[ci];
                            s[0] += dza[j] * v;
                            s[1] += dyb[j] * v;
                            s[2] += dxc[j] * v;
                        }
                        for k in 0..3 {
                            acc[k] += g * s[k];
                        }
                    }
                    for (k, ax) in [a, b, c].iter().enumerate() {
                        if !ax.clamped {
                            gfield[k * vol + idx] += acc[k];
                        }
                    }
                }
            }
        }
    }
    (gimg, gfield)
}
