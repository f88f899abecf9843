//! Warping, field composition, scaling-and-squaring integration and Jacobian analysis.
//!
//! Fields are `[3, D, H, W]` tensors in voxel units along `(d, h, w)`; the map is
//! `φ(p) = p + u(p)`. Sampling outside the volume clamps to the border.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default number of squaring steps.
pub const DEFAULT_STEPS: u32 = 7;
pub const MAX_STEPS: u32 = 12;

fn check_field<S: Scalar>(t: &Tensor<S>, what: &'static str) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 3 || s[1..].contains(&0) {
        return Err(Error::invalid(what, format!("expected [3, D, H, W], got {:?}", s)));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("{} values", what)));
    }
    Ok(())
}

/// Single- or multi-channel volume `[C, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeImage<S> {
    data: Tensor<S>,
}

impl<S: Scalar> VolumeImage<S> {
    pub fn new(data: Tensor<S>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::invalid("volume", format!("expected [C, D, H, W], got {:?}", s)));
        }
        Ok(Self { data })
    }

    /// One-channel volume from `D·H·W` values.
    pub fn from_single(extents: [usize; 3], data: Vec<S>) -> Result<Self> {
        Self::new(Tensor::new([1, extents[0], extents[1], extents[2]], data)?)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.data
    }
}

macro_rules! field_type {
    ($(#[$m:meta])* $name:ident, $what:literal) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<S> {
            data: Tensor<S>,
        }

        impl<S: Scalar> $name<S> {
            pub fn new(data: Tensor<S>) -> Result<Self> {
                check_field(&data, $what)?;
                Ok(Self { data })
            }

            pub fn zeros(extents: [usize; 3]) -> Self {
                Self {
                    data: Tensor::zeros([3, extents[0], extents[1], extents[2]]),
                }
            }

            pub fn extents(&self) -> [usize; 3] {
                let s = self.data.shape();
                [s[1], s[2], s[3]]
            }

            pub fn tensor(&self) -> &Tensor<S> {
                &self.data
            }

            pub fn into_tensor(self) -> Tensor<S> {
                self.data
            }
        }
    };
}

field_type!(
    /// Per-voxel displacement `u`.
    DisplacementField,
    "displacement field"
);
field_type!(
    /// Stationary velocity `v`.
    VelocityField,
    "velocity field"
);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntegrationConfig {
    pub steps: u32,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > MAX_STEPS {
            return Err(Error::config(
                "steps",
                format!("must lie in 1..={}, got {}", MAX_STEPS, self.steps),
            ));
        }
        Ok(())
    }
}

/// `(a ∘ b)(p) = b(p) + a(p + b(p))` on the graph.
pub fn compose<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape("compose", g.shape(a), g.shape(b)));
    }
    let a_at = g.warp(a, b)?;
    g.add(b, a_at)
}

/// Scaling and squaring: `u₀ = v / 2^T`, then `T` self-compositions.
pub fn integrate<S: Scalar>(g: &mut Graph<S>, v: Var, cfg: IntegrationConfig) -> Result<Var> {
    cfg.validate()?;
    let mut u = g.scale(v, S::from_f64(1.0 / (1u64 << cfg.steps) as f64));
    for _ in 0..cfg.steps {
        u = compose(g, u, u)?;
    }
    Ok(u)
}

/// Evaluates `f` on constant inputs and returns the output value.
fn eval<S: Scalar>(inputs: &[&Tensor<S>], f: impl FnOnce(&mut Graph<S>, &[Var]) -> Result<Var>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

pub fn warp_volume<S: Scalar>(image: &VolumeImage<S>, u: &DisplacementField<S>) -> Result<VolumeImage<S>> {
    let out = eval(&[image.tensor(), u.tensor()], |g, v| g.warp(v[0], v[1]))?;
    VolumeImage::new(out)
}

pub fn compose_fields<S: Scalar>(a: &DisplacementField<S>, b: &DisplacementField<S>) -> Result<DisplacementField<S>> {
    let out = eval(&[a.tensor(), b.tensor()], |g, v| compose(g, v[0], v[1]))?;
    DisplacementField::new(out)
}

pub fn integrate_velocity<S: Scalar>(v: &VelocityField<S>, cfg: IntegrationConfig) -> Result<DisplacementField<S>> {
    let out = eval(&[v.tensor()], |g, x| integrate(g, x[0], cfg))?;
    DisplacementField::new(out)
}

/// Folding summary over interior voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldingStats {
    /// Interior voxels with `det ≤ 0`.
    pub count: usize,
    pub fraction: f64,
    pub interior_voxels: usize,
    pub det_min: f64,
    pub det_max: f64,
    pub det_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianReport {
    /// `det(I + ∇u)` at every voxel, `[D, H, W]`.
    pub det: Tensor<f64>,
    pub stats: FoldingStats,
}

/// Per-voxel `det(I + ∇u)`: central differences inside, one-sided at faces.
pub fn jacobian_determinant<S: Scalar>(u: &DisplacementField<S>) -> Result<JacobianReport> {
    let dims = u.extents();
    if dims.iter().any(|&n| n < 3) {
        return Err(Error::invalid(
            "jacobian_determinant",
            format!("every extent must be at least 3, got {:?}", dims),
        ));
    }
    let [d, h, w] = dims;
    let vox = d * h * w;
    let data = u.tensor().data();
    let at = |c: usize, z: usize, y: usize, x: usize| data[c * vox + (z * h + y) * w + x].as_f64();
    // derivative of channel c along axis a at (z, y, x)
    let diff = |c: usize, a: usize, p: [usize; 3]| {
        let n = dims[a];
        let (lo, hi) = if p[a] == 0 {
            (0, 1)
        } else if p[a] == n - 1 {
            (n - 2, n - 1)
        } else {
            (p[a] - 1, p[a] + 1)
        };
        let mut pl = p;
        let mut ph = p;
        pl[a] = lo;
        ph[a] = hi;
        (at(c, ph[0], ph[1], ph[2]) - at(c, pl[0], pl[1], pl[2])) / (hi - lo) as f64
    };
    let mut det = Vec::with_capacity(vox);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z, y, x];
                let mut j = [[0.0f64; 3]; 3];
                for (c, row) in j.iter_mut().enumerate() {
                    for (a, v) in row.iter_mut().enumerate() {
                        *v = diff(c, a, p) + if a == c { 1.0 } else { 0.0 };
                    }
                }
                det.push(
                    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]),
                );
            }
        }
    }
    let mut count = 0;
    let mut interior = 0;
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = det[(z * h + y) * w + x];
                interior += 1;
                if v <= 0.0 {
                    count += 1;
                }
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
        }
    }
    let stats = FoldingStats {
        count,
        fraction: count as f64 / interior as f64,
        interior_voxels: interior,
        det_min: lo,
        det_max: hi,
        det_mean: sum / interior as f64,
    };
    Ok(JacobianReport {
        det: Tensor::new([d, h, w], det)?,
        stats,
    })
}
