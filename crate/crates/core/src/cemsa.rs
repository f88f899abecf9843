//! Convolution-based efficient multi-head self-attention (CEMSA) and the
//! transformer block built around it.
//!
//! Token layout is `[N, d_m]` with tokens ordered row-major over the stage's
//! `(D, H, W)` grid. Inside the attention:
//!
//! * `Q = Flatten(DWConv_s(Reshape(x)))`, with no projection after the conv;
//! * `K, V = Linear_{k,v}(LN(GConv(DWConv_s(Reshape(x)))))`, where GConv is a
//!   `1×1×1` grouped convolution;
//! * each head computes `softmax(Q_h K_hᵀ / √d_k) V_h`, heads are concatenated
//!   and passed through an output projection.
//!
//! The block is pre-norm with two residual paths and a GELU feed-forward
//! network; there is no positional embedding (the convolutions carry position).

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::nn::{clamp_kernel, tokens_to_volume, volume_to_tokens, Conv3d, LayerNorm, Linear};
use crate::params::{Init, ParamLayout};
use crate::scalar::Scalar;

/// Resolved configuration of one CEMSA block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CemsaConfig {
    pub dim: usize,
    pub heads: usize,
    /// Configured depthwise kernel `s`; clamped to the stage extents when built.
    pub dw_kernel: usize,
    pub groups: usize,
    pub ffn_expansion: usize,
    pub spatial: [usize; 3],
    /// Stride of the K/V depthwise convolution (1 keeps every token).
    pub kv_stride: usize,
    /// Q and K/V read the same depthwise convolution output.
    pub shared_dw: bool,
}

impl CemsaConfig {
    /// Defaults: `groups = dim`, FFN expansion 4, K/V stride 1, shared depthwise conv.
    pub fn new(dim: usize, heads: usize, dw_kernel: usize, spatial: [usize; 3]) -> Self {
        Self {
            dim,
            heads,
            dw_kernel,
            groups: dim,
            ffn_expansion: 4,
            spatial,
            kv_stride: 1,
            shared_dw: true,
        }
    }

    pub fn tokens(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Kernel after clamping to the stage extents.
    pub fn effective_kernel(&self) -> usize {
        clamp_kernel(self.dw_kernel, self.spatial)
    }

    fn kv_spatial(&self) -> [usize; 3] {
        let k = self.effective_kernel();
        self.spatial
            .map(|n| crate::kernels::conv::output_extent(n, k, self.kv_stride, k / 2).unwrap_or(0))
    }

    pub fn kv_tokens(&self) -> usize {
        self.kv_spatial().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads),
            ));
        }
        if self.groups == 0 || !self.dim.is_multiple_of(self.groups) {
            return Err(Error::config("groups", format!("{} does not divide dim {}", self.groups, self.dim)));
        }
        if self.dw_kernel == 0 || self.ffn_expansion == 0 || self.kv_stride == 0 {
            return Err(Error::config("dw_kernel", "kernel, ffn expansion and kv stride must be positive"));
        }
        if self.spatial.contains(&0) {
            return Err(Error::config("spatial", "stage extents must be positive"));
        }
        if self.kv_stride > 1 && self.shared_dw {
            return Err(Error::config("kv_stride", "a strided K/V path needs its own depthwise conv (shared_dw = false)"));
        }
        Ok(())
    }
}

/// Parameters of one CEMSA transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct CemsaBlock {
    pub cfg: CemsaConfig,
    pub ln1: LayerNorm,
    pub dw_q: Conv3d,
    /// Separate K/V depthwise conv; `None` when shared with Q.
    pub dw_kv: Option<Conv3d>,
    pub g_kv: Conv3d,
    pub ln_kv: LayerNorm,
    pub proj_k: Linear,
    pub proj_v: Linear,
    pub proj_out: Linear,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// Learnable-scalar breakdown of a transformer block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockCount {
    /// Everything inside the attention sub-layer, output projection included.
    pub attention: usize,
    pub ffn: usize,
    /// The two block-level layer norms.
    pub norms: usize,
}

impl BlockCount {
    pub fn total(&self) -> usize {
        self.attention + self.ffn + self.norms
    }
}

impl CemsaBlock {
    pub fn new(layout: &mut ParamLayout, name: &str, cfg: CemsaConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let s = cfg.effective_kernel();
        let ln1 = LayerNorm::new(layout, &format!("{}.ln1", name), d);
        let dw_q = Conv3d::depthwise(layout, &format!("{}.dw_q", name), d, s)?;
        let dw_kv = if cfg.shared_dw {
            None
        } else {
            Some(Conv3d::new(
                layout,
                &format!("{}.dw_kv", name),
                d,
                d,
                s,
                ConvSpec::new(cfg.kv_stride, s / 2, d),
                Init::Kaiming { fan_in: s * s * s, gain: 1.0 },
            )?)
        };
        let g_kv = Conv3d::grouped(layout, &format!("{}.g_kv", name), d, d, 1, cfg.groups)?;
        let ln_kv = LayerNorm::new(layout, &format!("{}.ln_kv", name), d);
        let proj_k = Linear::new(layout, &format!("{}.proj_k", name), d, d);
        let proj_v = Linear::new(layout, &format!("{}.proj_v", name), d, d);
        let proj_out = Linear::new(layout, &format!("{}.proj_out", name), d, d);
        let ln2 = LayerNorm::new(layout, &format!("{}.ln2", name), d);
        let hidden = cfg.ffn_expansion * d;
        let ffn1 = Linear::new(layout, &format!("{}.ffn1", name), d, hidden);
        let ffn2 = Linear::new(layout, &format!("{}.ffn2", name), hidden, d);
        Ok(Self {
            cfg,
            ln1,
            dw_q,
            dw_kv,
            g_kv,
            ln_kv,
            proj_k,
            proj_v,
            proj_out,
            ln2,
            ffn1,
            ffn2,
        })
    }

    fn check_tokens<S: Scalar>(&self, g: &Graph<S>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] != self.cfg.tokens() || s[1] != self.cfg.dim {
            return Err(Error::invalid(
                "cemsa",
                format!(
                    "expected [{}, {}] tokens for spatial shape {:?}, got {:?}",
                    self.cfg.tokens(),
                    self.cfg.dim,
                    self.cfg.spatial,
                    s
                ),
            ));
        }
        Ok(())
    }

    /// Q, K, V projections of already-normalised tokens.
    pub fn qkv<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<(Var, Var, Var)> {
        self.check_tokens(g, x)?;
        let vol = tokens_to_volume(g, x, self.cfg.spatial)?;
        let q_vol = self.dw_q.forward(g, p, vol)?;
        let q = volume_to_tokens(g, q_vol)?;
        let kv_vol = match &self.dw_kv {
            Some(dw) => dw.forward(g, p, vol)?,
            None => q_vol,
        };
        let kv_vol = self.g_kv.forward(g, p, kv_vol)?;
        let kv = volume_to_tokens(g, kv_vol)?;
        let kv = self.ln_kv.forward(g, p, kv)?;
        let k = self.proj_k.forward(g, p, kv)?;
        let v = self.proj_v.forward(g, p, kv)?;
        Ok((q, k, v))
    }

    /// Multi-head attention followed by the output projection.
    pub fn attention<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], q: Var, k: Var, v: Var) -> Result<Var> {
        let heads = multi_head_attention(g, q, k, v, self.cfg.heads)?;
        self.proj_out.forward(g, p, heads)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        self.check_tokens(g, x)?;
        let h = self.ln1.forward(g, p, x)?;
        let (q, k, v) = self.qkv(g, p, h)?;
        let a = self.attention(g, p, q, k, v)?;
        let y = g.add(x, a)?;
        let h2 = self.ln2.forward(g, p, y)?;
        let f = self.ffn1.forward(g, p, h2)?;
        let f = g.gelu(f);
        let f = self.ffn2.forward(g, p, f)?;
        g.add(y, f)
    }

    pub fn param_count(&self) -> BlockCount {
        let attention = self.dw_q.param_count()
            + self.dw_kv.map_or(0, |c| c.param_count())
            + self.g_kv.param_count()
            + self.ln_kv.param_count()
            + self.proj_k.param_count()
            + self.proj_v.param_count()
            + self.proj_out.param_count();
        BlockCount {
            attention,
            ffn: self.ffn1.param_count() + self.ffn2.param_count(),
            norms: self.ln1.param_count() + self.ln2.param_count(),
        }
    }
}

/// Per-head `softmax(Q_h K_hᵀ / √d_k) V_h`, heads concatenated along channels.
/// `q` is `[N, d]`; `k`, `v` are `[M, d]`.
pub fn multi_head_attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
        return Err(Error::shape("multi_head_attention", &sq, &sk));
    }
    let (n, m, d) = (sq[0], sk[0], sq[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config("heads", format!("dim {} is not divisible by {} heads", d, heads)));
    }
    let dk = d / heads;
    let qh = g.reshape(q, &[n, heads, dk])?;
    let qh = g.permute(qh, &[1, 0, 2])?; // [h, N, dk]
    let kh = g.reshape(k, &[m, heads, dk])?;
    let kt = g.permute(kh, &[1, 2, 0])?; // [h, dk, M]
    let vh = g.reshape(v, &[m, heads, dk])?;
    let vh = g.permute(vh, &[1, 0, 2])?; // [h, M, dk]
    let scores = g.batch_matmul(qh, kt)?;
    let scores = g.scale(scores, S::one() / S::from_usize(dk).sqrt());
    let weights = g.softmax_lastdim(scores)?;
    let out = g.batch_matmul(weights, vh)?; // [h, N, dk]
    let out = g.permute(out, &[1, 0, 2])?;
    g.reshape(out, &[n, d])
}

/// Closed-form parameter count of a CEMSA block.
pub fn count_parameters(cfg: &CemsaConfig) -> BlockCount {
    let d = cfg.dim;
    let s = cfg.effective_kernel();
    let dw = d * s * s * s + d;
    let dw_total = if cfg.shared_dw { dw } else { 2 * dw };
    let gconv = d * (d / cfg.groups) + d;
    let attention = dw_total + gconv + 2 * d + 3 * (d * d + d);
    BlockCount {
        attention,
        ffn: ffn_count(d, cfg.ffn_expansion),
        norms: 4 * d,
    }
}

/// Weights (bias excluded) of the K/V grouped convolution.
pub fn grouped_conv_weights(dim: usize, groups: usize) -> usize {
    dim * (dim / groups)
}

fn ffn_count(d: usize, expansion: usize) -> usize {
    let h = expansion * d;
    (d * h + h) + (h * d + d)
}

/// Parameter count of a standard MSA block at the same width: Q, K, V and output
/// projections plus the same FFN and norms.
pub fn count_standard_parameters(dim: usize, ffn_expansion: usize) -> BlockCount {
    BlockCount {
        attention: 4 * (dim * dim + dim),
        ffn: ffn_count(dim, ffn_expansion),
        norms: 4 * dim,
    }
}

/// Multiply-accumulates of one CEMSA block forward pass.
pub fn count_flops(cfg: &CemsaConfig) -> u64 {
    let d = cfg.dim as u64;
    let n = cfg.tokens() as u64;
    let m = cfg.kv_tokens() as u64;
    let s3 = cfg.effective_kernel().pow(3) as u64;
    let dw = n * d * s3 + if cfg.shared_dw { 0 } else { m * d * s3 };
    let gconv = m * d * (d / cfg.groups as u64);
    let kv = 2 * m * d * d;
    let attn = 2 * n * m * d;
    let out = n * d * d;
    let ffn = 2 * n * d * d * cfg.ffn_expansion as u64;
    dw + gconv + kv + attn + out + ffn
}

/// Multiply-accumulates of a standard MSA block over `tokens` tokens.
pub fn count_standard_flops(dim: usize, tokens: usize, ffn_expansion: usize) -> u64 {
    let (d, n) = (dim as u64, tokens as u64);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * d * ffn_expansion as u64
}

#[allow(clippy::needless_range_loop)]
#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn standard_count_closed_form() {
        let c = count_standard_parameters(8, 4);
        assert_eq!(c.attention, 4 * (8 * 8 + 8));
        assert_eq!(c.ffn, (8 * 32 + 32) + (32 * 8 + 8));
        assert_eq!(c.attention + c.ffn, 840);
    }

    #[test]
    fn closed_form_matches_layout() {
        for shared in [true, false] {
            let mut cfg = CemsaConfig::new(16, 4, 5, [4, 6, 5]);
            cfg.shared_dw = shared;
            cfg.groups = 4;
            let mut layout = ParamLayout::new();
            let block = CemsaBlock::new(&mut layout, "b", cfg).unwrap();
            assert_eq!(block.param_count(), count_parameters(&cfg));
            assert_eq!(layout.num_scalars(), count_parameters(&cfg).total());
        }
    }

    #[test]
    fn cemsa_smaller_than_msa_from_dim_32_at_kernel_3() {
        for d in (8..=256).step_by(8) {
            let cfg = CemsaConfig::new(d, 1, 3, [8, 8, 8]);
            let less = count_parameters(&cfg).total() < count_standard_parameters(d, 4).total();
            assert_eq!(less, d >= 32, "d = {}", d);
        }
    }

    #[test]
    fn grouped_term_scales_inverse_with_groups() {
        for d in [8, 48, 96] {
            assert_eq!(grouped_conv_weights(d, d) * d, grouped_conv_weights(d, 1));
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(CemsaConfig::new(10, 3, 3, [3, 3, 3]).validate().is_err());
        let mut c = CemsaConfig::new(8, 2, 3, [3, 3, 3]);
        c.groups = 3;
        assert!(c.validate().is_err());
        let mut c = CemsaConfig::new(8, 2, 3, [3, 3, 3]);
        c.kv_stride = 2;
        assert!(c.validate().is_err());
        c.shared_dw = false;
        assert!(c.validate().is_ok());
    }

    fn bound(layout: &ParamLayout, g: &mut Graph<f64>, fill: impl Fn(&str, usize) -> f64) -> Vec<Var> {
        layout
            .specs()
            .iter()
            .map(|s| g.leaf(Tensor::from_fn(s.shape.clone(), |i| fill(&s.name, i))))
            .collect()
    }

    #[test]
    fn zero_weights_make_block_identity() {
        let cfg = CemsaConfig::new(8, 2, 3, [3, 3, 3]);
        let mut layout = ParamLayout::new();
        let block = CemsaBlock::new(&mut layout, "b", cfg).unwrap();
        let mut g = Graph::new();
        let p = bound(&layout, &mut g, |name, _| if name.ends_with("gamma") { 1.0 } else { 0.0 });
        let x = g.leaf(Tensor::from_fn(vec![27, 8], |i| (i as f64 * 0.13).sin()));
        let y = block.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn identity_configuration_qkv() {
        // s clamped to 1, delta depthwise kernel, identity grouped conv and projections
        let cfg = CemsaConfig::new(4, 2, 5, [1, 1, 3]);
        assert_eq!(cfg.effective_kernel(), 1);
        let mut layout = ParamLayout::new();
        let block = CemsaBlock::new(&mut layout, "b", cfg).unwrap();
        let mut g = Graph::new();
        let p = bound(&layout, &mut g, |name, i| {
            if name.ends_with("gamma") || name.contains("dw_q.weight") || name.contains("g_kv.weight") {
                1.0
            } else if name.contains("proj_k.weight") || name.contains("proj_v.weight") {
                if i / 4 == i % 4 { 1.0 } else { 0.0 }
            } else {
                0.0
            }
        });
        let x = g.leaf(Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.7).cos() * 2.0));
        let (q, k, v) = block.qkv(&mut g, &p, x).unwrap();
        assert_eq!(g.value(q), g.value(x));
        let gm = g.constant(Tensor::ones(vec![4]));
        let bt = g.constant(Tensor::zeros(vec![4]));
        let ln = g.layer_norm(x, gm, bt).unwrap();
        assert!(g.value(k).max_abs_diff(g.value(ln)).unwrap() < 1e-14);
        assert!(g.value(v).max_abs_diff(g.value(ln)).unwrap() < 1e-14);
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::from_fn(vec![1, 4], |i| i as f64));
        let k = g.leaf(Tensor::from_fn(vec![1, 4], |i| -(i as f64)));
        let v = g.leaf(Tensor::from_fn(vec![1, 4], |i| 3.0 + i as f64));
        let o = multi_head_attention(&mut g, q, k, v, 2).unwrap();
        assert_eq!(g.value(o), g.value(v));
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::from_fn(vec![5, 4], |i| (i as f64).sin()));
        let k = g.leaf(Tensor::from_fn(vec![5, 4], |i| (i % 4) as f64));
        let v = g.leaf(Tensor::from_fn(vec![5, 4], |i| (i as f64 * 0.3).cos()));
        let o = multi_head_attention(&mut g, q, k, v, 2).unwrap();
        let vd = g.value(v).data();
        let od = g.value(o).data();
        for c in 0..4 {
            let mean: f64 = (0..5).map(|r| vd[r * 4 + c]).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((od[r * 4 + c] - mean).abs() < 1e-12);
            }
        }
        assert!(multi_head_attention(&mut g, q, k, v, 3).is_err());
    }

    #[test]
    fn token_mismatch_rejected() {
        let cfg = CemsaConfig::new(8, 2, 3, [3, 3, 3]);
        let mut layout = ParamLayout::new();
        let block = CemsaBlock::new(&mut layout, "b", cfg).unwrap();
        let mut g = Graph::<f64>::new();
        let p = bound(&layout, &mut g, |_, _| 0.1);
        let x = g.leaf(Tensor::zeros(vec![26, 8]));
        assert!(block.forward(&mut g, &p, x).is_err());
    }
}
