//! The symmetric transformer registration network.
//!
//! Resolution levels: full and 1/2 are convolutional (stem and decoder conv
//! levels); 1/4, 1/8 and 1/16 are transformer stages with dims `C, 2C, 4C`.
//! The decoder mirrors the encoder: patch expanding (or a transposed conv in
//! conv variants), skip fusion, then blocks at each level, and finally a flow
//! head producing the 3-channel raw field.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cemsa::{self, CemsaBlock, CemsaConfig};
use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::loss::RegistrationMode;
use crate::nn::{leaky_gain, spatial_of, tokens_to_volume, volume_to_tokens, Conv3d, ConvTranspose3d, Linear, WEIGHT_STD};
use crate::params::{Init, ParamLayout};
use crate::scalar::Scalar;

/// Flow-head weight std, small so a fresh model predicts a near-zero field.
pub const FLOW_STD: f64 = 1e-5;
pub const PAPER_TOTAL_DEPTH: usize = 10;
pub const STAGES: usize = 3;

/// Where transformer stages are used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Symmetric,
    EncoderOnly,
    DecoderOnly,
    BottomOnly,
}

impl Placement {
    pub const ALL: [Placement; 4] = [
        Placement::Symmetric,
        Placement::EncoderOnly,
        Placement::DecoderOnly,
        Placement::BottomOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Symmetric => "symmetric",
            Placement::EncoderOnly => "encoder_only",
            Placement::DecoderOnly => "decoder_only",
            Placement::BottomOnly => "bottom_only",
        }
    }

    /// Whether encoder stage `i` (0 = 1/4) is a transformer stage.
    pub fn encoder_transformer(self, i: usize) -> bool {
        match self {
            Placement::Symmetric | Placement::EncoderOnly => true,
            Placement::DecoderOnly => false,
            Placement::BottomOnly => i == STAGES - 1,
        }
    }

    pub fn decoder_transformer(self, _i: usize) -> bool {
        matches!(self, Placement::Symmetric | Placement::DecoderOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `(D, H, W)`; each extent divisible by 16.
    pub input_shape: [usize; 3],
    /// Stage dims are `C, 2C, 4C` at 1/4, 1/8, 1/16.
    pub base_dim: usize,
    /// Blocks per stage, ordered 1/4, 1/8, 1/16.
    pub encoder_depths: [usize; STAGES],
    /// Blocks per stage, ordered 1/4, 1/8, 1/16.
    pub decoder_depths: [usize; STAGES],
    /// Required number of transformer blocks, when set.
    pub total_depth: Option<usize>,
    /// Depthwise kernel `s` per stage before clamping.
    pub stage_kernels: [usize; STAGES],
    pub heads: [usize; STAGES],
    /// Grouped-conv groups per stage; `None` uses the stage dim.
    pub groups: Option<[usize; STAGES]>,
    pub ffn_expansion: usize,
    pub patch_kernel: usize,
    pub placement: Placement,
    pub mode: RegistrationMode,
    pub leaky_slope: f64,
    /// Channels of the full and half resolution conv levels; `None` uses `[C, C]`.
    pub stem_dims: Option<[usize; 2]>,
    pub shared_dw: bool,
    pub kv_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32³ input, `C = 8`, one block per stage.
    pub fn desk() -> Self {
        Self {
            input_shape: [32, 32, 32],
            base_dim: 8,
            encoder_depths: [1, 1, 1],
            decoder_depths: [1, 1, 1],
            total_depth: None,
            stage_kernels: [24, 16, 12],
            heads: [2, 4, 8],
            groups: None,
            ffn_expansion: 4,
            patch_kernel: 3,
            placement: Placement::Symmetric,
            mode: RegistrationMode::Displacement,
            leaky_slope: 0.2,
            stem_dims: None,
            shared_dw: true,
            kv_stride: 1,
        }
    }

    /// 96×112×96 input, `C = 48`, depths `[2,2,2]` / `[2,1,1]`.
    pub fn paper() -> Self {
        Self {
            input_shape: [96, 112, 96],
            base_dim: 48,
            encoder_depths: [2, 2, 2],
            decoder_depths: [2, 1, 1],
            total_depth: Some(PAPER_TOTAL_DEPTH),
            ..Self::desk()
        }
    }

    pub fn stage_dim(&self, i: usize) -> usize {
        self.base_dim << i
    }

    /// Spatial extents at 1/2^level resolution.
    pub fn level_extents(&self, level: usize) -> [usize; 3] {
        self.input_shape.map(|n| n >> level)
    }

    /// Extents of transformer stage `i` (0 = 1/4).
    pub fn stage_extents(&self, i: usize) -> [usize; 3] {
        self.level_extents(i + 2)
    }

    pub fn stem(&self) -> [usize; 2] {
        self.stem_dims.unwrap_or([self.base_dim, self.base_dim])
    }

    pub fn depth_total(&self) -> usize {
        self.encoder_depths.iter().sum::<usize>() + self.decoder_depths.iter().sum::<usize>()
    }

    /// Depths summed over the stages that are transformer stages under `placement`.
    pub fn transformer_depth(&self) -> usize {
        (0..STAGES)
            .map(|i| {
                let e = if self.placement.encoder_transformer(i) { self.encoder_depths[i] } else { 0 };
                let d = if self.placement.decoder_transformer(i) { self.decoder_depths[i] } else { 0 };
                e + d
            })
            .sum()
    }

    pub fn cemsa_config(&self, i: usize) -> CemsaConfig {
        let dim = self.stage_dim(i);
        let mut c = CemsaConfig::new(dim, self.heads[i], self.stage_kernels[i], self.stage_extents(i));
        c.groups = self.groups.map_or(dim, |g| g[i]);
        c.ffn_expansion = self.ffn_expansion;
        c.kv_stride = self.kv_stride;
        c.shared_dw = self.shared_dw;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&n| n == 0 || n % 16 != 0) {
            return Err(Error::config(
                "input_shape",
                format!("every extent must be a positive multiple of 16, got {:?}", self.input_shape),
            ));
        }
        if self.base_dim == 0 || !self.base_dim.is_multiple_of(2) {
            return Err(Error::config("base_dim", format!("must be positive and even, got {}", self.base_dim)));
        }
        if let Some(t) = self.total_depth {
            if self.transformer_depth() != t {
                return Err(Error::config(
                    "total_depth",
                    format!("transformer stage depths sum to {}, expected {}", self.transformer_depth(), t),
                ));
            }
        }
        if self.patch_kernel == 0 || self.patch_kernel.is_multiple_of(2) {
            return Err(Error::config("patch_kernel", format!("must be odd, got {}", self.patch_kernel)));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::config("leaky_slope", "must be finite and >= 0"));
        }
        if self.stem().contains(&0) {
            return Err(Error::config("stem_dims", "channel counts must be positive"));
        }
        for i in 0..STAGES {
            self.cemsa_config(i).validate().map_err(|e| match e {
                Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                    field: format!("stage {} {}", i, field),
                    reason,
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Config for an ablation placement of a symmetric `cfg`. Replaced stages keep
/// their depths as conv-block depths; `bottom_only` moves every transformer block
/// to the 1/16 encoder stage.
pub fn make_ablation(cfg: &ModelConfig, placement: Placement) -> ModelConfig {
    let mut out = cfg.clone();
    out.placement = placement;
    if placement == Placement::BottomOnly && cfg.placement != Placement::BottomOnly {
        out.encoder_depths[STAGES - 1] = cfg.transformer_depth();
        out.decoder_depths[STAGES - 1] = 0;
    }
    if out.total_depth.is_some() {
        out.total_depth = Some(out.transformer_depth());
    }
    out
}

/// Stack of transformer or conv blocks operating on a `[C, D, H, W]` volume.
#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Transformer(Vec<CemsaBlock>),
    Conv(Vec<Conv3d>),
}

impl Body {
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var, slope: S) -> Result<Var> {
        match self {
            Body::Transformer(blocks) => {
                if blocks.is_empty() {
                    return Ok(x);
                }
                let spatial = spatial_of(g.shape(x));
                let mut t = volume_to_tokens(g, x)?;
                for b in blocks {
                    t = b.forward(g, p, t)?;
                }
                tokens_to_volume(g, t, spatial)
            }
            Body::Conv(convs) => {
                let mut y = x;
                for c in convs {
                    y = c.forward(g, p, y)?;
                    y = g.leaky_relu(y, slope);
                }
                Ok(y)
            }
        }
    }

    pub fn cemsa_blocks(&self) -> usize {
        match self {
            Body::Transformer(b) => b.len(),
            Body::Conv(_) => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Downsample {
    /// Strided patch-embedding conv, no activation.
    PatchEmbed(Conv3d),
    /// Strided conv followed by LeakyReLU.
    Conv(Conv3d),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Upsample {
    /// Linear `C → 2C`, 2×2×2 rearrangement, linear `C/4 → C/2`.
    PatchExpand { expand: Linear, project: Linear },
    /// Kernel-2 stride-2 transposed conv followed by LeakyReLU.
    Deconv(ConvTranspose3d),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub down: Downsample,
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    /// `None` at the bottom stage, which reads the encoder output directly.
    pub up: Option<(Upsample, Conv3d)>,
    pub body: Body,
}

/// Transposed conv to the next finer level plus skip fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLevel {
    pub up: ConvTranspose3d,
    pub fuse: Conv3d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymTrans {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub stem_full: Conv3d,
    pub stem_half: Conv3d,
    pub encoder: Vec<EncoderStage>,
    /// Ordered 1/4, 1/8, 1/16.
    pub decoder: Vec<DecoderStage>,
    pub up_half: ConvLevel,
    pub up_full: ConvLevel,
    pub flow: Conv3d,
}

fn conv_block(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, stride: usize, slope: f64) -> Result<Conv3d> {
    Conv3d::new(
        layout,
        name,
        cin,
        cout,
        3,
        ConvSpec::new(stride, 1, 1),
        Init::Kaiming {
            fan_in: cin * 27,
            gain: leaky_gain(slope),
        },
    )
}

fn conv_blocks(layout: &mut ParamLayout, name: &str, dim: usize, depth: usize, slope: f64) -> Result<Vec<Conv3d>> {
    (0..depth)
        .map(|j| conv_block(layout, &format!("{}.conv{}", name, j), dim, dim, 1, slope))
        .collect()
}

fn cemsa_blocks(layout: &mut ParamLayout, name: &str, cfg: CemsaConfig, depth: usize) -> Result<Vec<CemsaBlock>> {
    (0..depth)
        .map(|j| CemsaBlock::new(layout, &format!("{}.block{}", name, j), cfg))
        .collect()
}

impl SymTrans {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let slope = cfg.leaky_slope;
        let mut layout = ParamLayout::new();
        let l = &mut layout;
        let [f0, f1] = cfg.stem();
        let stem_full = conv_block(l, "stem.full", 2, f0, 1, slope)?;
        let stem_half = conv_block(l, "stem.half", f0, f1, 2, slope)?;

        let mut encoder = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let name = format!("enc{}", i);
            let cin = if i == 0 { f1 } else { cfg.stage_dim(i - 1) };
            let dim = cfg.stage_dim(i);
            let stage = if cfg.placement.encoder_transformer(i) {
                let k = cfg.patch_kernel;
                let embed = Conv3d::new(
                    l,
                    &format!("{}.embed", name),
                    cin,
                    dim,
                    k,
                    ConvSpec::new(2, k / 2, 1),
                    Init::TruncNormal { std: WEIGHT_STD },
                )?;
                EncoderStage {
                    down: Downsample::PatchEmbed(embed),
                    body: Body::Transformer(cemsa_blocks(l, &name, cfg.cemsa_config(i), cfg.encoder_depths[i])?),
                }
            } else {
                EncoderStage {
                    down: Downsample::Conv(conv_block(l, &format!("{}.down", name), cin, dim, 2, slope)?),
                    body: Body::Conv(conv_blocks(l, &name, dim, cfg.encoder_depths[i], slope)?),
                }
            };
            encoder.push(stage);
        }

        // built coarse to fine so the layout follows the data flow
        let mut decoder = Vec::with_capacity(STAGES);
        for i in (0..STAGES).rev() {
            let name = format!("dec{}", i);
            let dim = cfg.stage_dim(i);
            let transformer = cfg.placement.decoder_transformer(i);
            let up = if i + 1 < STAGES {
                let cin = cfg.stage_dim(i + 1);
                let up = if transformer {
                    Upsample::PatchExpand {
                        expand: Linear::new(l, &format!("{}.expand", name), cin, 2 * cin),
                        project: Linear::new(l, &format!("{}.project", name), cin / 4, cin / 2),
                    }
                } else {
                    Upsample::Deconv(ConvTranspose3d::new(l, &format!("{}.deconv", name), cin, dim, 2, slope))
                };
                let fuse = conv_block(l, &format!("{}.fuse", name), 2 * dim, dim, 1, slope)?;
                Some((up, fuse))
            } else {
                None
            };
            let body = if transformer {
                Body::Transformer(cemsa_blocks(l, &name, cfg.cemsa_config(i), cfg.decoder_depths[i])?)
            } else {
                Body::Conv(conv_blocks(l, &name, dim, cfg.decoder_depths[i], slope)?)
            };
            decoder.push(DecoderStage { up, body });
        }
        decoder.reverse();

        let c = cfg.stage_dim(0);
        let up_half = ConvLevel {
            up: ConvTranspose3d::new(l, "up_half.deconv", c, f1, 2, slope),
            fuse: conv_block(l, "up_half.fuse", 2 * f1, f1, 1, slope)?,
        };
        let up_full = ConvLevel {
            up: ConvTranspose3d::new(l, "up_full.deconv", f1, f0, 2, slope),
            fuse: conv_block(l, "up_full.fuse", 2 * f0, f0, 1, slope)?,
        };
        let flow = Conv3d::new(l, "flow", f0, 3, 3, ConvSpec::same(3, 1), Init::Normal { std: FLOW_STD })?;
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            stem_full,
            stem_half,
            encoder,
            decoder,
            up_half,
            up_full,
            flow,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_scalars()
    }

    /// CEMSA blocks per stage as `(encoder, decoder)`.
    pub fn cemsa_block_counts(&self) -> [(usize, usize); STAGES] {
        let mut out = [(0, 0); STAGES];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (self.encoder[i].body.cemsa_blocks(), self.decoder[i].body.cemsa_blocks());
        }
        out
    }

    /// Raw field `[3, D, H, W]` from `[1, D, H, W]` moving and fixed volumes.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], moving: Var, fixed: Var) -> Result<Var> {
        let want = [1, self.cfg.input_shape[0], self.cfg.input_shape[1], self.cfg.input_shape[2]];
        for v in [moving, fixed] {
            if g.shape(v) != want {
                return Err(Error::shape("model input", g.shape(v), &want));
            }
        }
        if p.len() != self.layout.len() {
            return Err(Error::invalid(
                "model parameters",
                format!("expected {} bound parameters, got {}", self.layout.len(), p.len()),
            ));
        }
        let slope = S::from_f64(self.cfg.leaky_slope);
        let x = g.concat(&[moving, fixed])?;
        let e_full = self.stem_full.forward(g, p, x)?;
        let e_full = g.leaky_relu(e_full, slope);
        let e_half = self.stem_half.forward(g, p, e_full)?;
        let e_half = g.leaky_relu(e_half, slope);

        let mut skips = Vec::with_capacity(STAGES);
        let mut h = e_half;
        for stage in &self.encoder {
            h = match &stage.down {
                Downsample::PatchEmbed(c) => c.forward(g, p, h)?,
                Downsample::Conv(c) => {
                    let y = c.forward(g, p, h)?;
                    g.leaky_relu(y, slope)
                }
            };
            h = stage.body.forward(g, p, h, slope)?;
            skips.push(h);
        }

        for i in (0..STAGES).rev() {
            let stage = &self.decoder[i];
            if let Some((up, fuse)) = &stage.up {
                let upsampled = match up {
                    Upsample::PatchExpand { expand, project } => {
                        let spatial = spatial_of(g.shape(h));
                        let t = volume_to_tokens(g, h)?;
                        let t = patch_expand(g, p, expand, project, t, spatial)?;
                        tokens_to_volume(g, t, spatial.map(|n| 2 * n))?
                    }
                    Upsample::Deconv(d) => {
                        let y = d.forward(g, p, h)?;
                        g.leaky_relu(y, slope)
                    }
                };
                h = fuse_skip(g, p, fuse, upsampled, skips[i], slope)?;
            }
            h = stage.body.forward(g, p, h, slope)?;
        }

        for (level, skip) in [(&self.up_half, e_half), (&self.up_full, e_full)] {
            let y = level.up.forward(g, p, h)?;
            let y = g.leaky_relu(y, slope);
            h = fuse_skip(g, p, &level.fuse, y, skip, slope)?;
        }
        self.flow.forward(g, p, h)
    }

    /// Per-module learnable scalars and multiply-accumulates.
    pub fn stage_costs(&self) -> Vec<StageCost> {
        let cfg = &self.cfg;
        let mut out = Vec::new();
        let full = cfg.level_extents(0);
        let half = cfg.level_extents(1);
        out.push(StageCost {
            name: "stem".into(),
            params: self.stem_full.param_count() + self.stem_half.param_count(),
            macs: self.stem_full.macs(full) + self.stem_half.macs(half),
            cemsa_blocks: 0,
        });
        for (i, st) in self.encoder.iter().enumerate() {
            let ext = cfg.stage_extents(i);
            let (down_p, down_m) = match &st.down {
                Downsample::PatchEmbed(c) | Downsample::Conv(c) => (c.param_count(), c.macs(ext)),
            };
            let (bp, bm) = body_cost(&st.body, cfg.cemsa_config(i), ext);
            out.push(StageCost {
                name: format!("enc{}", i),
                params: down_p + bp,
                macs: down_m + bm,
                cemsa_blocks: st.body.cemsa_blocks(),
            });
        }
        for i in (0..STAGES).rev() {
            let st = &self.decoder[i];
            let ext = cfg.stage_extents(i);
            let (mut params, mut macs) = body_cost(&st.body, cfg.cemsa_config(i), ext);
            if let Some((up, fuse)) = &st.up {
                let coarse = cfg.stage_extents(i + 1);
                let n = coarse.iter().product::<usize>();
                match up {
                    Upsample::PatchExpand { expand, project } => {
                        params += expand.param_count() + project.param_count();
                        macs += expand.macs(n) + project.macs(8 * n);
                    }
                    Upsample::Deconv(d) => {
                        params += d.param_count();
                        macs += d.macs(coarse);
                    }
                }
                params += fuse.param_count();
                macs += fuse.macs(ext);
            }
            out.push(StageCost {
                name: format!("dec{}", i),
                params,
                macs,
                cemsa_blocks: st.body.cemsa_blocks(),
            });
        }
        for (name, level, coarse, fine) in [
            ("up_half", &self.up_half, cfg.stage_extents(0), half),
            ("up_full", &self.up_full, half, full),
        ] {
            out.push(StageCost {
                name: name.into(),
                params: level.up.param_count() + level.fuse.param_count(),
                macs: level.up.macs(coarse) + level.fuse.macs(fine),
                cemsa_blocks: 0,
            });
        }
        out.push(StageCost {
            name: "flow".into(),
            params: self.flow.param_count(),
            macs: self.flow.macs(full),
            cemsa_blocks: 0,
        });
        out
    }
}

fn body_cost(body: &Body, cfg: CemsaConfig, ext: [usize; 3]) -> (usize, u64) {
    match body {
        Body::Transformer(blocks) => (
            blocks.len() * cemsa::count_parameters(&cfg).total(),
            blocks.len() as u64 * cemsa::count_flops(&cfg),
        ),
        Body::Conv(convs) => (
            convs.iter().map(|c| c.param_count()).sum(),
            convs.iter().map(|c| c.macs(ext)).sum(),
        ),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
    pub cemsa_blocks: usize,
}

/// Learnable scalars of the model built from `cfg`.
pub fn model_count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(SymTrans::new(cfg)?.num_params())
}

/// Tokens `[N, C]` on a `(D, H, W)` grid to `[8N, C/2]` tokens on `(2D, 2H, 2W)`.
///
/// Each token's expanded `2C` vector is read channel-major: element
/// `c·8 + dd·4 + hh·2 + ww` becomes channel `c` of the fine voxel
/// `(2d + dd, 2h + hh, 2w + ww)`.
pub fn patch_expand<S: Scalar>(
    g: &mut Graph<S>,
    p: &[Var],
    expand: &Linear,
    project: &Linear,
    x: Var,
    spatial: [usize; 3],
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [d, h, w] = spatial;
    if s.len() != 2 || s[0] != d * h * w {
        return Err(Error::invalid("patch_expand", format!("{:?} tokens for spatial shape {:?}", s, spatial)));
    }
    let c = s[1];
    if !c.is_multiple_of(4) || expand.in_dim != c || expand.out_dim != 2 * c || project.in_dim != c / 4 {
        return Err(Error::invalid("patch_expand", format!("channel count {} must be divisible by 4 and match the projections", c)));
    }
    let y = expand.forward(g, p, x)?;
    let q = c / 4;
    let y = g.reshape(y, &[d, h, w, q, 2, 2, 2])?;
    let y = g.permute(y, &[0, 4, 1, 5, 2, 6, 3])?;
    let y = g.reshape(y, &[8 * d * h * w, q])?;
    project.forward(g, p, y)
}

/// Concatenates decoder and encoder volumes on channels, then conv + LeakyReLU.
pub fn fuse_skip<S: Scalar>(g: &mut Graph<S>, p: &[Var], fuse: &Conv3d, decoder: Var, encoder: Var, slope: S) -> Result<Var> {
    let (sd, se) = (g.shape(decoder).to_vec(), g.shape(encoder).to_vec());
    if sd.len() != 4 || se.len() != 4 || sd[1..] != se[1..] {
        return Err(Error::shape("fuse_skip", &sd, &se));
    }
    if sd[0] + se[0] != fuse.in_channels {
        return Err(Error::invalid(
            "fuse_skip",
            format!("{} + {} channels do not match the fusion conv input {}", sd[0], se[0], fuse.in_channels),
        ));
    }
    let cat = g.concat(&[decoder, encoder])?;
    let y = fuse.forward(g, p, cat)?;
    Ok(g.leaky_relu(y, slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig {
            input_shape: [16, 16, 16],
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        let mut c = toy();
        c.input_shape = [16, 20, 16];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::paper();
        c.decoder_depths = [1, 1, 1];
        assert!(c.validate().is_err());
        let mut c = toy();
        c.heads = [3, 4, 8];
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn forward_shape_and_small_initial_field() {
        let cfg = toy();
        let m = SymTrans::new(&cfg).unwrap();
        let store = m.layout.initialize::<f32, _>(&mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let a = g.constant(Tensor::from_fn([1, 16, 16, 16], |i| ((i % 7) as f32) / 7.0));
        let b = g.constant(Tensor::from_fn([1, 16, 16, 16], |i| ((i % 5) as f32) / 5.0));
        let u = m.forward(&mut g, &p, a, b).unwrap();
        assert_eq!(g.shape(u), &[3, 16, 16, 16]);
        assert!(g.value(u).max_abs() < 0.01);
    }

    #[test]
    fn stage_costs_are_additive() {
        for placement in Placement::ALL {
            let cfg = make_ablation(&toy(), placement);
            let m = SymTrans::new(&cfg).unwrap();
            let total: usize = m.stage_costs().iter().map(|s| s.params).sum();
            assert_eq!(total, m.num_params(), "{:?}", placement);
        }
    }

    #[test]
    fn ablation_block_placement() {
        let base = ModelConfig::paper();
        assert_eq!(make_ablation(&base, Placement::Symmetric), base);
        let b = SymTrans::new(&make_ablation(&base, Placement::BottomOnly)).unwrap();
        assert_eq!(b.cemsa_block_counts(), [(0, 0), (0, 0), (10, 0)]);
        let e = SymTrans::new(&make_ablation(&base, Placement::EncoderOnly)).unwrap();
        assert_eq!(e.cemsa_block_counts(), [(2, 0), (2, 0), (2, 0)]);
        let d = SymTrans::new(&make_ablation(&base, Placement::DecoderOnly)).unwrap();
        assert_eq!(d.cemsa_block_counts(), [(0, 2), (0, 1), (0, 1)]);
    }

    #[test]
    fn count_grows_with_base_dim() {
        let mut prev = 0;
        for c in [4, 8, 12, 16] {
            let n = model_count_parameters(&ModelConfig { base_dim: c, ..toy() }).unwrap();
            assert!(n > prev);
            prev = n;
        }
    }

    #[test]
    fn patch_expand_rearrangement() {
        // identity-like expand: output element j of a token equals input channel j / 2
        let mut layout = ParamLayout::new();
        let expand = Linear::new(&mut layout, "e", 4, 8);
        let project = Linear::new(&mut layout, "p", 1, 2);
        let mut g = Graph::<f64>::new();
        let we = g.constant(Tensor::from_fn([8, 4], |i| if i % 4 == (i / 4) / 2 { 1.0 } else { 0.0 }));
        let be = g.constant(Tensor::zeros([8]));
        let wp = g.constant(Tensor::from_fn([2, 1], |i| [1.0, 0.0][i]));
        let bp = g.constant(Tensor::zeros([2]));
        let p = vec![we, be, wp, bp];
        let x = g.constant(Tensor::from_fn([2, 4], |i| i as f64));
        let y = patch_expand(&mut g, &p, &expand, &project, x, [1, 1, 2]).unwrap();
        assert_eq!(g.shape(y), &[16, 2]);
        // fine voxel (dd, hh, ww') with ww' = 2·w + ww reads element dd·4 + hh·2 + ww
        let v = g.value(y).data();
        for dd in 0..2 {
            for hh in 0..2 {
                for wf in 0..4 {
                    let (w, ww) = (wf / 2, wf % 2);
                    let e = dd * 4 + hh * 2 + ww;
                    let token = (dd * 2 + hh) * 4 + wf;
                    assert_eq!(v[token * 2], (w * 4 + e / 2) as f64);
                    assert_eq!(v[token * 2 + 1], 0.0);
                }
            }
        }
    }
}
