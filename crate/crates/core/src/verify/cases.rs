//! Gradient-check cases covering every differentiable operation.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cemsa::{multi_head_attention, CemsaBlock, CemsaConfig};
use crate::deform::{compose, integrate, IntegrationConfig};
use crate::error::Result;
use crate::gradcheck::GraphFn;
use crate::graph::{ConvSpec, Graph, Var};
use crate::loss::{similarity_loss, smoothness_loss, total_loss, LossConfig, RegistrationMode};
use crate::model::{fuse_skip, patch_expand, ModelConfig, SymTrans};
use crate::nn::{Conv3d, Linear};
use crate::params::{Init, ParamLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::verify::oracle;

#[derive(Clone, Debug)]
enum Kind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    LeakyRelu(f64),
    Gelu,
    Matmul,
    BatchMatmul,
    Linear,
    Softmax,
    LayerNorm,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Narrow { axis: usize, start: usize, len: usize },
    Concat,
    Sum,
    Mean,
    Conv(ConvSpec),
    ConvTranspose,
    Warp,
    Compose,
    Integrate(IntegrationConfig),
    Similarity,
    Smoothness,
    TotalLoss(RegistrationMode, LossConfig),
    Attention(usize),
    Cemsa(Box<CemsaBlock>),
    PatchExpand { expand: Linear, project: Linear, spatial: [usize; 3] },
    FuseSkip { fuse: Conv3d, slope: f64 },
    Model(Box<SymTrans>),
}

/// One scalar function of random leaves: the op output contracted with fixed weights.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    /// Coordinates sampled per leaf; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Leaves the function is exactly invariant to; their gradient must vanish.
    pub invariant: Vec<usize>,
    /// Leading inputs that are module parameters.
    params: usize,
    kind: Kind,
}

fn contraction_weight(i: usize) -> f64 {
    libm::sin(0.7 * i as f64 + 0.3) + 0.25
}

/// `Σ y ⊙ r` with a fixed, index-determined `r`.
fn contract<S: Scalar>(g: &mut Graph<S>, y: Var) -> Result<Var> {
    let r = Tensor::from_fn(g.shape(y).to_vec(), |i| S::from_f64(contraction_weight(i)));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

impl GraphFn for GradCase {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, v: &[Var]) -> Result<Var> {
        let (p, x) = v.split_at(self.params);
        let c = S::from_f64;
        let y = match &self.kind {
            Kind::Add => g.add(x[0], x[1])?,
            Kind::Sub => g.sub(x[0], x[1])?,
            Kind::Mul => g.mul(x[0], x[1])?,
            Kind::Scale(a) => g.scale(x[0], c(*a)),
            Kind::AddScalar(a) => g.add_scalar(x[0], c(*a)),
            Kind::LeakyRelu(s) => g.leaky_relu(x[0], c(*s)),
            Kind::Gelu => g.gelu(x[0]),
            Kind::Matmul => g.matmul(x[0], x[1])?,
            Kind::BatchMatmul => g.batch_matmul(x[0], x[1])?,
            Kind::Linear => g.linear(x[0], x[1], Some(x[2]))?,
            Kind::Softmax => g.softmax_lastdim(x[0])?,
            Kind::LayerNorm => g.layer_norm(x[0], x[1], x[2])?,
            Kind::Reshape(s) => g.reshape(x[0], s)?,
            Kind::Permute(perm) => g.permute(x[0], perm)?,
            Kind::Narrow { axis, start, len } => g.narrow(x[0], *axis, *start, *len)?,
            Kind::Concat => g.concat(x)?,
            Kind::Sum => g.sum(x[0]),
            Kind::Mean => g.mean(x[0]),
            Kind::Conv(spec) => g.conv3d(x[0], x[1], Some(x[2]), *spec)?,
            Kind::ConvTranspose => g.conv_transpose3d(x[0], x[1], Some(x[2]))?,
            Kind::Warp => g.warp(x[0], x[1])?,
            Kind::Compose => compose(g, x[0], x[1])?,
            Kind::Integrate(cfg) => integrate(g, x[0], *cfg)?,
            Kind::Similarity => similarity_loss(g, x[0], x[1])?,
            Kind::Smoothness => smoothness_loss(g, x[0])?,
            Kind::TotalLoss(mode, cfg) => total_loss(g, x[0], x[1], x[2], cfg, *mode)?.loss,
            Kind::Attention(heads) => multi_head_attention(g, x[0], x[1], x[2], *heads)?,
            Kind::Cemsa(block) => block.forward(g, p, x[0])?,
            Kind::PatchExpand { expand, project, spatial } => patch_expand(g, p, expand, project, x[0], *spatial)?,
            Kind::FuseSkip { fuse, slope } => fuse_skip(g, p, fuse, x[0], x[1], c(*slope))?,
            Kind::Model(model) => model.forward(g, p, x[0], x[1])?,
        };
        contract(g, y)
    }
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.0.random_range(lo..hi))
    }

    /// Random sign, magnitude in `[lo, hi)`.
    fn signed(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = self.0.random_range(lo..hi);
            if self.0.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    /// Initialised parameters with a random offset so biases and norms are off their defaults.
    fn params(&mut self, layout: &ParamLayout) -> Vec<Tensor<f64>> {
        let store = layout.initialize::<f64, _>(&mut self.0);
        store
            .into_tensors()
            .into_iter()
            .map(|t| {
                let noise = self.uniform(t.shape(), -0.1, 0.1);
                Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
                    .expect("same shape")
            })
            .collect()
    }
}

/// Key biases add the same constant to every score of a query, which softmax ignores.
fn key_biases(layout: &ParamLayout) -> Vec<usize> {
    layout
        .specs()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.name.ends_with("proj_k.bias"))
        .map(|(i, _)| i)
        .collect()
}

fn case(name: &'static str, kind: Kind, inputs: Vec<Tensor<f64>>) -> GradCase {
    GradCase {
        name,
        inputs,
        max_coords: None,
        invariant: Vec::new(),
        params: 0,
        kind,
    }
}

fn with_params(name: &'static str, kind: Kind, params: Vec<Tensor<f64>>, data: Vec<Tensor<f64>>) -> GradCase {
    let n = params.len();
    let mut inputs = params;
    inputs.extend(data);
    GradCase {
        name,
        inputs,
        max_coords: None,
        invariant: Vec::new(),
        params: n,
        kind,
    }
}

/// Tiny full model used by the whole-network check.
///
/// The LeakyReLU slope is set to 1 so the finite-difference step cannot straddle a
/// kink among the thousands of activations (the LeakyReLU rule has its own case).
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_shape: [16, 16, 16],
        leaky_slope: 1.0,
        ..ModelConfig::desk()
    }
}

fn fuse_skip_case(s: &mut Sampler) -> Result<GradCase> {
    let mut layout = ParamLayout::new();
    let fuse = Conv3d::new(
        &mut layout,
        "fuse",
        4,
        2,
        3,
        ConvSpec::same(3, 1),
        Init::Kaiming { fan_in: 4 * 27, gain: 1.0 },
    )?;
    // Resample until every pre-activation is well clear of the LeakyReLU kink.
    loop {
        let params = s.params(&layout);
        let dec = s.uniform(&[2, 3, 3, 3], -1.0, 1.0);
        let enc = s.uniform(&[2, 3, 3, 3], -1.0, 1.0);
        let mut cat = dec.data().to_vec();
        cat.extend_from_slice(enc.data());
        let cat = Tensor::new([4, 3, 3, 3], cat)?;
        let pre = oracle::conv3d(&cat, &params[0], Some(&params[1]), 1, 1, 1);
        if pre.data().iter().all(|v| v.abs() > 0.05) {
            return Ok(with_params("fuse_skip", Kind::FuseSkip { fuse, slope: 0.2 }, params, vec![dec, enc]));
        }
    }
}

/// Every differentiable operation, from elementwise ops to the whole network.
pub fn grad_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let m34 = [3, 4];
    out.push(case("add", Kind::Add, vec![s.uniform(&m34, -1.0, 1.0), s.uniform(&m34, -1.0, 1.0)]));
    out.push(case("sub", Kind::Sub, vec![s.uniform(&m34, -1.0, 1.0), s.uniform(&m34, -1.0, 1.0)]));
    out.push(case("mul", Kind::Mul, vec![s.uniform(&m34, -1.0, 1.0), s.uniform(&m34, -1.0, 1.0)]));
    out.push(case("scale", Kind::Scale(-1.7), vec![s.uniform(&m34, -1.0, 1.0)]));
    out.push(case("add_scalar", Kind::AddScalar(0.4), vec![s.uniform(&m34, -1.0, 1.0)]));
    out.push(case("leaky_relu", Kind::LeakyRelu(0.2), vec![s.signed(&[16], 0.1, 1.0)]));
    out.push(case("gelu", Kind::Gelu, vec![s.uniform(&[16], -1.0, 1.0)]));
    out.push(case("matmul", Kind::Matmul, vec![s.uniform(&[5, 7], -1.0, 1.0), s.uniform(&[7, 3], -1.0, 1.0)]));
    out.push(case(
        "batch_matmul",
        Kind::BatchMatmul,
        vec![s.uniform(&[2, 3, 4], -1.0, 1.0), s.uniform(&[2, 4, 5], -1.0, 1.0)],
    ));
    out.push(case(
        "linear",
        Kind::Linear,
        vec![s.uniform(&[6, 5], -1.0, 1.0), s.uniform(&[4, 5], -1.0, 1.0), s.uniform(&[4], -1.0, 1.0)],
    ));
    out.push(case("softmax", Kind::Softmax, vec![s.uniform(&[4, 6], -1.0, 1.0)]));
    out.push(case(
        "layer_norm",
        Kind::LayerNorm,
        vec![s.uniform(&[5, 8], -1.0, 1.0), s.uniform(&[8], 0.5, 1.5), s.uniform(&[8], -0.5, 0.5)],
    ));
    out.push(case("reshape", Kind::Reshape(vec![4, 6]), vec![s.uniform(&[2, 3, 4], -1.0, 1.0)]));
    out.push(case("permute", Kind::Permute(vec![2, 0, 1]), vec![s.uniform(&[2, 3, 4], -1.0, 1.0)]));
    out.push(case(
        "narrow",
        Kind::Narrow { axis: 1, start: 1, len: 2 },
        vec![s.uniform(&[3, 4, 5], -1.0, 1.0)],
    ));
    out.push(case(
        "concat",
        Kind::Concat,
        vec![s.uniform(&[2, 3, 3, 3], -1.0, 1.0), s.uniform(&[1, 3, 3, 3], -1.0, 1.0)],
    ));
    out.push(case("sum", Kind::Sum, vec![s.uniform(&m34, -1.0, 1.0)]));
    out.push(case("mean", Kind::Mean, vec![s.uniform(&m34, -1.0, 1.0)]));
    out.push(case(
        "conv3d_dense",
        Kind::Conv(ConvSpec::new(1, 1, 1)),
        vec![s.uniform(&[2, 5, 5, 5], -1.0, 1.0), s.uniform(&[3, 2, 3, 3, 3], -0.5, 0.5), s.uniform(&[3], -0.5, 0.5)],
    ));
    out.push(case(
        "conv3d_grouped_strided",
        Kind::Conv(ConvSpec::new(2, 1, 2)),
        vec![s.uniform(&[4, 4, 4, 4], -1.0, 1.0), s.uniform(&[4, 2, 3, 3, 3], -0.5, 0.5), s.uniform(&[4], -0.5, 0.5)],
    ));
    out.push(case(
        "conv3d_depthwise",
        Kind::Conv(ConvSpec::same(3, 3)),
        vec![s.uniform(&[3, 5, 5, 5], -1.0, 1.0), s.uniform(&[3, 1, 3, 3, 3], -0.5, 0.5), s.uniform(&[3], -0.5, 0.5)],
    ));
    out.push(case(
        "conv_transpose3d",
        Kind::ConvTranspose,
        vec![s.uniform(&[2, 3, 3, 3], -1.0, 1.0), s.uniform(&[2, 3, 2, 2, 2], -0.5, 0.5), s.uniform(&[3], -0.5, 0.5)],
    ));
    // Fractional offsets stay away from integers so no tap switches cells under the step.
    out.push(case(
        "warp",
        Kind::Warp,
        vec![s.uniform(&[2, 5, 5, 5], -1.0, 1.0), s.signed(&[3, 5, 5, 5], 0.2, 0.8)],
    ));
    out.push(case(
        "compose",
        Kind::Compose,
        vec![s.uniform(&[3, 5, 5, 5], -1.0, 1.0), s.signed(&[3, 5, 5, 5], 0.2, 0.8)],
    ));
    // Positive velocities keep every intermediate displacement inside one cell.
    out.push(case(
        "integrate",
        Kind::Integrate(IntegrationConfig::default()),
        vec![s.uniform(&[3, 5, 5, 5], 0.2, 0.8)],
    ));
    out.push(case(
        "similarity_loss",
        Kind::Similarity,
        vec![s.uniform(&[1, 4, 4, 4], 0.0, 1.0), s.uniform(&[1, 4, 4, 4], 0.0, 1.0)],
    ));
    out.push(case("smoothness_loss", Kind::Smoothness, vec![s.uniform(&[3, 4, 4, 4], -1.0, 1.0)]));
    let loss_cfg = LossConfig::default();
    out.push(case(
        "total_loss_displacement",
        Kind::TotalLoss(RegistrationMode::Displacement, loss_cfg),
        vec![
            s.uniform(&[1, 5, 5, 5], 0.0, 1.0),
            s.uniform(&[1, 5, 5, 5], 0.0, 1.0),
            s.signed(&[3, 5, 5, 5], 0.2, 0.8),
        ],
    ));
    out.push(case(
        "total_loss_diffeomorphic",
        Kind::TotalLoss(RegistrationMode::Diffeomorphic, loss_cfg),
        vec![
            s.uniform(&[1, 5, 5, 5], 0.0, 1.0),
            s.uniform(&[1, 5, 5, 5], 0.0, 1.0),
            s.uniform(&[3, 5, 5, 5], 0.2, 0.8),
        ],
    ));
    out.push(case(
        "multi_head_attention",
        Kind::Attention(2),
        vec![s.uniform(&[4, 4], -1.0, 1.0), s.uniform(&[5, 4], -1.0, 1.0), s.uniform(&[5, 4], -1.0, 1.0)],
    ));
    for (name, shared) in [("cemsa_block", true), ("cemsa_block_separate_dw", false)] {
        let mut layout = ParamLayout::new();
        let cfg = CemsaConfig {
            shared_dw: shared,
            ..CemsaConfig::new(8, 2, 3, [3, 3, 3])
        };
        let block = CemsaBlock::new(&mut layout, "block", cfg)?;
        let params = s.params(&layout);
        let mut c = with_params(name, Kind::Cemsa(Box::new(block)), params, vec![s.uniform(&[27, 8], -1.0, 1.0)]);
        c.invariant = key_biases(&layout);
        out.push(c);
    }
    {
        let mut layout = ParamLayout::new();
        let expand = Linear::new(&mut layout, "expand", 8, 16);
        let project = Linear::new(&mut layout, "project", 2, 4);
        let params = s.params(&layout);
        out.push(with_params(
            "patch_expand",
            Kind::PatchExpand {
                expand,
                project,
                spatial: [2, 2, 2],
            },
            params,
            vec![s.uniform(&[8, 8], -1.0, 1.0)],
        ));
    }
    out.push(fuse_skip_case(&mut s)?);
    {
        let model = SymTrans::new(&tiny_model_config())?;
        let params = s.params(&model.layout);
        let invariant = key_biases(&model.layout);
        let shape = [1, 16, 16, 16];
        let images = vec![s.uniform(&shape, 0.0, 1.0), s.uniform(&shape, 0.0, 1.0)];
        let mut c = with_params("model", Kind::Model(Box::new(model)), params, images);
        c.max_coords = Some(2);
        c.invariant = invariant;
        out.push(c);
    }
    Ok(out)
}
