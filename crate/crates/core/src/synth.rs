//! Seeded synthetic volume pairs with a known smooth, fold-free deformation.
//!
//! Pair `i` of a stream only depends on `(seed, i)`, so any pair can be
//! regenerated on its own.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{jacobian_determinant, warp_volume, DisplacementField, VolumeImage};
use crate::error::{Error, Result};
use crate::loss::{warp_labels, LabelMap};
use crate::params::standard_normal;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    #[default]
    Spheres,
    Boxes,
    /// Alternates spheres and boxes per label.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub extents: [usize; 3],
    pub shapes: ShapeFamily,
    /// Foreground labels `1..=labels`, one object each.
    pub labels: u32,
    /// Object radius (half side for boxes) range in voxels.
    pub radius: [f64; 2],
    /// Object intensity range; background is 0.
    pub intensity: [f64; 2],
    /// Largest voxel displacement of the generating field.
    pub amplitude: f64,
    /// Gaussian width (voxels) smoothing the random field.
    pub smoothing: f64,
    /// Gaussian width (voxels) applied to the rendered image; 0 disables.
    pub image_blur: f64,
    /// Amplitude reductions (factor 0.7) allowed when the field folds.
    pub max_retries: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            extents: [32, 32, 32],
            shapes: ShapeFamily::Spheres,
            labels: 3,
            radius: [5.0, 8.0],
            intensity: [0.4, 1.0],
            amplitude: 5.0,
            smoothing: 6.0,
            image_blur: 1.0,
            max_retries: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&n| n < 3) {
            return Err(Error::config("extents", format!("every extent must be at least 3, got {:?}", self.extents)));
        }
        if self.labels == 0 {
            return Err(Error::config("labels", "at least one foreground label is required"));
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.radius) || self.radius[0] <= 0.0 {
            return Err(Error::config("radius", format!("need 0 < min <= max, got {:?}", self.radius)));
        }
        if !ordered(self.intensity) || self.intensity[0] <= 0.0 {
            return Err(Error::config("intensity", format!("need 0 < min <= max, got {:?}", self.intensity)));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::config("amplitude", format!("must be finite and >= 0, got {}", self.amplitude)));
        }
        if !(self.smoothing > 0.0) || !self.smoothing.is_finite() {
            return Err(Error::config("smoothing", format!("must be > 0, got {}", self.smoothing)));
        }
        if !(self.image_blur >= 0.0) || !self.image_blur.is_finite() {
            return Err(Error::config("image_blur", format!("must be >= 0, got {}", self.image_blur)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub moving: VolumeImage<f64>,
    pub fixed: VolumeImage<f64>,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
    pub u_true: DisplacementField<f64>,
    /// Amplitude actually used after fold retries.
    pub amplitude: f64,
}

/// Generator for pair `index` of the stream `seed`.
pub fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Border handling of [`gaussian_blur`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Clamp,
    Wrap,
}

/// Separable Gaussian blur of a `[D, H, W]` array.
pub fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64, boundary: Boundary) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let [d, h, w] = dims;
    let strides = [h * w, w, 1];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let st = strides[axis];
        let mut out = vec![0.0; cur.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let pos = [z, y, x][axis] as isize;
                    let base = i - pos as usize * st;
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        let q = pos + j as isize - radius;
                        let q = match boundary {
                            Boundary::Clamp => q.clamp(0, n - 1),
                            Boundary::Wrap => q.rem_euclid(n),
                        } as usize;
                        acc += k * cur[base + q * st];
                    }
                    out[i] = acc;
                }
            }
        }
        cur = out;
    }
    cur
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Renders labels and intensities; later objects overwrite earlier ones.
fn render<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> (Vec<u32>, Vec<f64>) {
    let [d, h, w] = spec.extents;
    let mut labels = vec![0u32; d * h * w];
    let mut image = vec![0.0; d * h * w];
    for l in 1..=spec.labels {
        let r = uniform(rng, spec.radius);
        let center: Vec<f64> = spec
            .extents
            .iter()
            .map(|&n| {
                let lo = r.min(n as f64 / 2.0);
                let hi = (n as f64 - 1.0 - r).max(lo);
                uniform(rng, [lo, hi])
            })
            .collect();
        let value = uniform(rng, spec.intensity);
        let sphere = match spec.shapes {
            ShapeFamily::Spheres => true,
            ShapeFamily::Boxes => false,
            ShapeFamily::Mixed => l % 2 == 1,
        };
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let o = [z as f64 - center[0], y as f64 - center[1], x as f64 - center[2]];
                    let inside = if sphere {
                        o.iter().map(|v| v * v).sum::<f64>() <= r * r
                    } else {
                        o.iter().all(|v| v.abs() <= r)
                    };
                    if inside {
                        let i = (z * h + y) * w + x;
                        labels[i] = l;
                        image[i] = value;
                    }
                }
            }
        }
    }
    (labels, image)
}

/// Periodically smoothed Gaussian noise, three channels, rescaled to unit max magnitude.
fn random_field<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<f64> {
    let n: usize = spec.extents.iter().product();
    let mut out = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let noise: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        out.extend(gaussian_blur(&noise, spec.extents, spec.smoothing, Boundary::Wrap));
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v /= peak;
        }
    }
    out
}

pub fn generate_pair(spec: &SyntheticSpec, seed: u64, index: u64) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = pair_rng(seed, index);
    let (labels, image) = render(spec, &mut rng);
    let image = gaussian_blur(&image, spec.extents, spec.image_blur, Boundary::Clamp);
    let base = random_field(spec, &mut rng);
    let [d, h, w] = spec.extents;
    let mut amplitude = spec.amplitude;
    let mut attempt = 0;
    let u_true = loop {
        let u = DisplacementField::new(Tensor::new([3, d, h, w], base.iter().map(|v| v * amplitude).collect())?)?;
        if jacobian_determinant(&u)?.stats.count == 0 {
            break u;
        }
        if attempt == spec.max_retries {
            return Err(Error::Generation(format!(
                "generating field still folds after {} amplitude reductions",
                spec.max_retries
            )));
        }
        attempt += 1;
        amplitude *= 0.7;
    };
    let moving = VolumeImage::from_single(spec.extents, image)?;
    let moving_labels = LabelMap::new(spec.extents, labels)?;
    let fixed = warp_volume(&moving, &u_true)?;
    let fixed_labels = warp_labels(&moving_labels, &u_true)?;
    Ok(SyntheticPair {
        moving,
        fixed,
        moving_labels,
        fixed_labels,
        u_true,
        amplitude,
    })
}
