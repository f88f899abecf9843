//! Scaling-and-squaring invariants.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deform::{compose_fields, integrate_velocity, jacobian_determinant, DisplacementField, IntegrationConfig, VelocityField};
use crate::error::Result;
use crate::params::standard_normal;
use crate::scalar::Precision;
use crate::synth::{gaussian_blur, Boundary};
use crate::tensor::Tensor;
use crate::verify::{CheckResult, Suite};

pub const CONSTANT_VELOCITY_TOL: f64 = 1e-4;
pub const INVERSE_CONSISTENCY_TOL: f64 = 0.1;

/// Smooth periodic random field rescaled to `max |v| = peak`.
pub fn smooth_field(extents: [usize; 3], sigma: f64, peak: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = extents.iter().product();
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let noise: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        data.extend(gaussian_blur(&noise, extents, sigma, Boundary::Wrap));
    }
    let m = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let [d, h, w] = extents;
    Tensor::new([3, d, h, w], data.into_iter().map(|v| v * peak / m).collect()).expect("field shape")
}

/// Largest displacement magnitude over voxels at least `margin` from every face.
pub fn interior_max(u: &Tensor<f64>, margin: usize) -> f64 {
    let s = u.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let vol = d * h * w;
    let mut worst = 0.0f64;
    for z in margin..d.saturating_sub(margin) {
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                let i = (z * h + y) * w + x;
                let m = libm::sqrt((0..3).map(|c| u.data()[c * vol + i] * u.data()[c * vol + i]).sum::<f64>());
                worst = worst.max(m);
            }
        }
    }
    worst
}

fn sub(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()).expect("same shape")
}

fn scaled(a: &Tensor<f64>, c: f64) -> Tensor<f64> {
    a.map(|v| v * c)
}

fn integrate(v: &Tensor<f64>, cfg: IntegrationConfig) -> Result<Tensor<f64>> {
    Ok(integrate_velocity(&VelocityField::new(v.clone())?, cfg)?.into_tensor())
}

pub fn diffeo_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = IntegrationConfig::default();
    let wide = Some(Precision::Wide);
    let mut out = Vec::new();

    let extents = [[8, 8, 8], [12, 10, 9], [16, 16, 16]];
    let mut zero_err = 0.0f64;
    for e in extents {
        let u = integrate(&Tensor::zeros([3, e[0], e[1], e[2]]), cfg)?;
        zero_err = zero_err.max(u.max_abs());
    }
    let mut r = CheckResult::bounded(Suite::Diffeo, "integrate_zero_is_zero", wide, extents.len(), zero_err, f64::MIN_POSITIVE);
    r.passed = zero_err == 0.0;
    r.detail = "exact equality".into();
    out.push(r);

    let shifts = [[0.7, -1.3, 0.4], [2.0, 0.0, -0.5], [-0.25, 0.9, 1.6]];
    let mut const_err = 0.0f64;
    for c in shifts {
        let e = [20, 20, 20];
        let n: usize = e.iter().product();
        let v = Tensor::from_fn([3, e[0], e[1], e[2]], |i| c[i / n]);
        let u = integrate(&v, cfg)?;
        let margin = libm::ceil(c.iter().fold(0.0f64, |m, x| m.max(x.abs()))) as usize + 1;
        const_err = const_err.max(interior_max(&sub(&u, &v), margin));
    }
    let mut r = CheckResult::bounded(Suite::Diffeo, "constant_velocity", wide, shifts.len(), const_err, CONSTANT_VELOCITY_TOL);
    r.detail = "max interior |integrate(c) - c| in voxels".into();
    out.push(r);

    let e = [24, 24, 24];
    let margin = 4;
    let mut inv_err = 0.0f64;
    let mut folds = 0usize;
    let instances = 5;
    for k in 0..instances {
        let v = smooth_field(e, 3.0, 2.0, seed.wrapping_add(k));
        let fwd = DisplacementField::new(integrate(&v, cfg)?)?;
        let bwd = DisplacementField::new(integrate(&scaled(&v, -1.0), cfg)?)?;
        let round = compose_fields(&fwd, &bwd)?;
        inv_err = inv_err.max(interior_max(round.tensor(), margin));
        folds += jacobian_determinant(&fwd)?.stats.count;
    }
    let mut r = CheckResult::bounded(Suite::Diffeo, "inverse_consistency", wide, instances as usize, inv_err, INVERSE_CONSISTENCY_TOL);
    r.detail = format!("max interior |phi_v o phi_-v - id| at max |v| = 2, margin {}", margin);
    out.push(r);

    let mut r = CheckResult::bounded(Suite::Diffeo, "smooth_velocity_is_fold_free", wide, instances as usize, folds as f64, 1.0);
    r.passed = folds == 0;
    r.detail = "folded interior voxels summed over instances".into();
    out.push(r);

    let v = smooth_field([16, 16, 16], 3.0, 2.0, seed.wrapping_add(100));
    let mut residuals = Vec::new();
    for alpha in [1.0, 0.5, 0.25, 0.125] {
        let av = scaled(&v, alpha);
        let u = integrate(&av, cfg)?;
        residuals.push(sub(&u, &av).max_abs() / alpha);
    }
    let decreasing = residuals.windows(2).all(|w| w[1] < w[0]);
    let last = *residuals.last().expect("four scales");
    let mut r = CheckResult::bounded(Suite::Diffeo, "first_order_consistency", wide, residuals.len(), last, residuals[0]);
    r.passed = decreasing;
    r.detail = format!("max |integrate(a v) - a v| / a for a = 1, 1/2, 1/4, 1/8: {:?}", residuals);
    out.push(r);
    Ok(out)
}
