//! Analytic-vs-numerical gradient verification.
//!
//! The analytic gradient is taken from [`Graph::backward`] at the precision under
//! test; the numerical reference is always the fourth-order central difference
//! `(8(f(x + ε) − f(x − ε)) − (f(x + 2ε) − f(x − 2ε))) / 12ε` evaluated in 64-bit, with `ε = eps · scale(x)` where
//! `scale(x)` is the root-mean-square magnitude of the leaf, floored at [`MIN_SCALE`].
//! The per-leaf error is `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`
//! over the checked coordinates (falling back to the absolute error when both
//! gradients vanish).

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound of the per-leaf step scale, so all-zero leaves still get a usable step.
pub const MIN_SCALE: f64 = 1e-2;

/// Root-mean-square magnitude of `x`, floored at [`MIN_SCALE`].
pub fn step_scale(x: &Tensor<f64>) -> f64 {
    if x.is_empty() {
        return 1.0;
    }
    let ms = x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    libm::sqrt(ms).max(MIN_SCALE)
}

/// A scalar function of a fixed list of leaves that can be rebuilt at any precision.
pub trait GraphFn {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Var>;
}

impl<T: GraphFn + ?Sized> GraphFn for &T {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Var> {
        (**self).build(g, inputs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Relative step; the absolute step is `eps · scale(x)` per leaf.
    pub eps: f64,
    /// Check at most this many coordinates per leaf (randomly chosen); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafReport {
    pub leaf: usize,
    pub coords_checked: usize,
    pub max_abs_err: f64,
    /// Largest analytic or numeric gradient magnitude over the checked coordinates.
    pub scale: f64,
    pub rel_err: f64,
    pub worst_coord: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_err).fold(0.0, f64::max)
    }

    /// Leaf with the largest relative error.
    pub fn worst(&self) -> Option<&LeafReport> {
        self.leaves.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

fn evaluate<F: GraphFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.build(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.shape(out).to_vec()))
}

/// Analytic gradients of `f` at precision `A` for every input leaf.
pub fn analytic_grads<A: Scalar, F: GraphFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::<A>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.cast())).collect();
    let out = f.build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradient populated").cast())
        .collect())
}

/// Compares analytic gradients computed at precision `A` against 64-bit fourth-order central differences.
pub fn grad_check<A: Scalar, F: GraphFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads::<A, F>(f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut leaves = Vec::with_capacity(inputs.len());
    for (li, x) in inputs.iter().enumerate() {
        let n = x.len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let step = cfg.eps * step_scale(x);
        let mut max_abs = 0.0f64;
        let mut worst = coords.first().copied().unwrap_or(0);
        let mut scale = 0.0f64;
        for &c in &coords {
            let orig = x.data()[c];
            let mut at = |k: f64| -> Result<f64> {
                work[li].data_mut()[c] = orig + k * step;
                evaluate(f, &work)
            };
            let (fp, fm, fp2, fm2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work[li].data_mut()[c] = orig;
            let numeric = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * step);
            let a = analytic[li].data()[c];
            let err = (a - numeric).abs();
            if err > max_abs || !err.is_finite() {
                max_abs = err;
                worst = c;
            }
            scale = scale.max(numeric.abs()).max(a.abs());
        }
        let rel_err = if scale > 1e-12 { max_abs / scale } else { max_abs };
        leaves.push(LeafReport {
            leaf: li,
            coords_checked: coords.len(),
            max_abs_err: max_abs,
            scale,
            rel_err,
            worst_coord: worst,
        });
    }
    Ok(GradCheckReport { leaves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    struct LinearLayer;
    impl GraphFn for LinearLayer {
        fn build<S: Scalar>(&self, g: &mut Graph<S>, v: &[Var]) -> Result<Var> {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let r = g.constant(Tensor::from_fn(vec![3, 2], |i| S::from_f64(0.3 * i as f64 - 0.7)));
            let p = g.mul(y, r)?;
            Ok(g.sum(p))
        }
    }

    struct Constant;
    impl GraphFn for Constant {
        fn build<S: Scalar>(&self, g: &mut Graph<S>, v: &[Var]) -> Result<Var> {
            let z = g.scale(v[0], S::zero());
            let s = g.sum(z);
            Ok(g.add_scalar(s, S::from_f64(4.0)))
        }
    }

    fn inputs() -> Vec<Tensor<f64>> {
        vec![
            Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.37).sin()),
            Tensor::from_fn(vec![2, 4], |i| (i as f64 * 0.91).cos()),
            Tensor::from_fn(vec![2], |i| i as f64 * 0.1),
        ]
    }

    #[test]
    fn linear_layer_wide_precision() {
        let r = grad_check::<f64, _>(&LinearLayer, &inputs(), &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-7, "{:?}", r);
    }

    #[test]
    fn linear_layer_standard_precision() {
        let r = grad_check::<f32, _>(&LinearLayer, &inputs(), &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-4, "{:?}", r);
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let x = vec![Tensor::from_fn(vec![5], |i| i as f64)];
        let g = analytic_grads::<f64, _>(&Constant, &x).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
        let r = grad_check::<f64, _>(&Constant, &x, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.max_rel_err(), 0.0);
    }

    #[test]
    fn coordinate_subsampling() {
        let cfg = GradCheckConfig {
            max_coords: Some(3),
            ..Default::default()
        };
        let r = grad_check::<f64, _>(&LinearLayer, &inputs(), &cfg).unwrap();
        assert_eq!(r.leaves[0].coords_checked, 3);
        assert_eq!(r.leaves[2].coords_checked, 2);
    }
}
