//! Convolution, linear and normalisation layers built on [`Graph`] ops.
//!
//! Layers hold [`ParamId`]s into a [`ParamLayout`]; forward passes look the
//! bound [`Var`]s up in the slice produced by [`crate::params::ParamStore::bind`].

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::params::{Init, ParamId, ParamLayout};
use crate::scalar::Scalar;

/// Std of linear and patch-embedding weights.
pub const WEIGHT_STD: f64 = 0.02;

/// Kaiming gain for a LeakyReLU with negative slope `slope`.
pub fn leaky_gain(slope: f64) -> f64 {
    libm::sqrt(2.0 / (1.0 + slope * slope))
}

/// Largest odd kernel not exceeding `s` or the smallest extent.
pub fn clamp_kernel(s: usize, extents: [usize; 3]) -> usize {
    let limit = s.min(*extents.iter().min().unwrap()).max(1);
    if limit % 2 == 1 {
        limit
    } else {
        limit - 1
    }
}

/// 3D convolution parameters: weight `[out, in/groups, k, k, k]`, bias `[out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv3d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Result<Self> {
        let g = spec.groups;
        if g == 0 || !in_channels.is_multiple_of(g) || !out_channels.is_multiple_of(g) {
            return Err(Error::config(
                name,
                format!("in={} and out={} channels must be divisible by groups={}", in_channels, out_channels, g),
            ));
        }
        if kernel == 0 || spec.stride == 0 {
            return Err(Error::config(name, "kernel and stride must be positive"));
        }
        let weight = layout.add(
            format!("{}.weight", name),
            [out_channels, in_channels / g, kernel, kernel, kernel],
            init,
        );
        let bias = layout.add(format!("{}.bias", name), [out_channels], Init::Zeros);
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            spec,
        })
    }

    /// Depthwise convolution (`groups == channels`), stride 1, same padding.
    pub fn depthwise(layout: &mut ParamLayout, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(name, format!("depthwise kernel must be odd, got {}", kernel)));
        }
        let fan_in = kernel * kernel * kernel;
        Self::new(
            layout,
            name,
            channels,
            channels,
            kernel,
            ConvSpec::same(kernel, channels),
            Init::Kaiming { fan_in, gain: 1.0 },
        )
    }

    /// Grouped convolution, stride 1, same padding.
    pub fn grouped(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
    ) -> Result<Self> {
        let fan_in = (in_channels / groups.max(1)) * kernel * kernel * kernel;
        Self::new(
            layout,
            name,
            in_channels,
            out_channels,
            kernel,
            ConvSpec::same(kernel, groups),
            Init::Kaiming { fan_in, gain: 1.0 },
        )
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.conv3d(x, p[self.weight.index()], Some(p[self.bias.index()]), self.spec)
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.spec.groups) * self.kernel.pow(3)
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels
    }

    /// Output extents for an input of spatial size `input`.
    pub fn output_extents(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = crate::kernels::conv::output_extent(input[a], self.kernel, self.spec.stride, self.spec.padding)?;
        }
        Some(out)
    }

    /// Multiply-accumulates for one forward pass producing `output` voxels.
    pub fn macs(&self, output: [usize; 3]) -> u64 {
        (output.iter().product::<usize>() * self.weight_count()) as u64
    }
}

/// Transposed convolution with kernel == stride (non-overlapping upsampling).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvTranspose3d {
    pub fn new(layout: &mut ParamLayout, name: &str, in_channels: usize, out_channels: usize, kernel: usize, slope: f64) -> Self {
        let weight = layout.add(
            format!("{}.weight", name),
            [in_channels, out_channels, kernel, kernel, kernel],
            Init::Kaiming {
                fan_in: in_channels,
                gain: leaky_gain(slope),
            },
        );
        let bias = layout.add(format!("{}.bias", name), [out_channels], Init::Zeros);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.conv_transpose3d(x, p[self.weight.index()], Some(p[self.bias.index()]))
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel.pow(3) + self.out_channels
    }

    pub fn macs(&self, input: [usize; 3]) -> u64 {
        (input.iter().product::<usize>() * self.in_channels * self.out_channels * self.kernel.pow(3)) as u64
    }
}

/// Per-token affine map: weight `[out, in]`, bias `[out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = layout.add(format!("{}.weight", name), [out_dim, in_dim], Init::TruncNormal { std: WEIGHT_STD });
        let bias = layout.add(format!("{}.bias", name), [out_dim], Init::Zeros);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.weight.index()], Some(p[self.bias.index()]))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.in_dim * self.out_dim) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        let gamma = layout.add(format!("{}.gamma", name), [dim], Init::Ones);
        let beta = layout.add(format!("{}.beta", name), [dim], Init::Zeros);
        Self { gamma, beta, dim }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma.index()], p[self.beta.index()])
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// `[N, C]` tokens (row-major over (d, h, w)) to a `[C, D, H, W]` volume.
pub fn tokens_to_volume<S: Scalar>(g: &mut Graph<S>, x: Var, spatial: [usize; 3]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n: usize = spatial.iter().product();
    if s.len() != 2 || s[0] != n {
        return Err(Error::invalid("tokens_to_volume", format!("{:?} tokens for spatial shape {:?}", s, spatial)));
    }
    let t = g.permute(x, &[1, 0])?;
    g.reshape(t, &[s[1], spatial[0], spatial[1], spatial[2]])
}

/// `[C, D, H, W]` volume to `[N, C]` tokens.
pub fn volume_to_tokens<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("volume_to_tokens", format!("expected [C, D, H, W], got {:?}", s)));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
    g.permute(flat, &[1, 0])
}

/// Spatial extents of a `[C, D, H, W]` node.
pub fn spatial_of(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn clamp_kernel_rules() {
        assert_eq!(clamp_kernel(24, [8, 8, 8]), 7);
        assert_eq!(clamp_kernel(16, [4, 4, 4]), 3);
        assert_eq!(clamp_kernel(12, [2, 2, 2]), 1);
        assert_eq!(clamp_kernel(3, [8, 8, 8]), 3);
        assert_eq!(clamp_kernel(24, [24, 28, 24]), 23);
        assert_eq!(clamp_kernel(4, [8, 8, 8]), 3);
    }

    #[test]
    fn grouped_param_count_scales_inverse_with_groups() {
        let mut l = ParamLayout::new();
        let dense = Conv3d::grouped(&mut l, "a", 16, 16, 1, 1).unwrap();
        let grouped = Conv3d::grouped(&mut l, "b", 16, 16, 1, 16).unwrap();
        assert_eq!(dense.weight_count(), 16 * grouped.weight_count());
        assert_eq!(grouped.param_count(), 16 + 16);
        assert_eq!(l.num_scalars(), dense.param_count() + grouped.param_count());
        assert!(Conv3d::grouped(&mut l, "c", 16, 16, 1, 3).is_err());
        assert!(Conv3d::depthwise(&mut l, "d", 4, 2).is_err());
    }

    #[test]
    fn tokens_volume_round_trip() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(Tensor::from_fn(vec![3, 2, 2, 2], |i| i as f64));
        let t = volume_to_tokens(&mut g, v).unwrap();
        assert_eq!(g.shape(t), &[8, 3]);
        // token n channel c == volume channel c voxel n
        assert_eq!(g.value(t).data()[5 * 3 + 2], 2.0 * 8.0 + 5.0);
        let back = tokens_to_volume(&mut g, t, [2, 2, 2]).unwrap();
        assert_eq!(g.value(back), g.value(v));
    }
}
