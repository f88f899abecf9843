//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every executed operation in order. Each recorded node
//! holds its forward value and whatever the backward rule needs; [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates gradients additively.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeometry, TransposeGeometry};
use crate::kernels::warp;
use crate::scalar::Scalar;
use crate::tensor::{inverse_permutation, is_permutation, numel, permute_data, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, S),
    AddScalar(Var),
    LeakyRelu(Var, S),
    Gelu(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<S>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: TransposeGeometry,
    },
    Warp {
        image: Var,
        field: Var,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Convolution hyperparameters passed to [`Graph::conv3d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with "same" zero padding for an odd kernel.
    pub const fn same(kernel: usize, groups: usize) -> Self {
        Self::new(1, kernel / 2, groups)
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::None)
        } else if sa.is_empty() {
            Ok(Bcast::Lhs)
        } else if sb.is_empty() {
            Ok(Bcast::Rhs)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: fn(Var, Var, Bcast) -> Op<S>) -> Result<Var> {
        let bc = self.binary_bcast(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let (shape, data): (Vec<usize>, Vec<S>) = match bc {
            Bcast::None => (self.shape(a).to_vec(), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()),
            Bcast::Lhs => (self.shape(b).to_vec(), db.iter().map(|&y| f(da[0], y)).collect()),
            Bcast::Rhs => (self.shape(a).to_vec(), da.iter().map(|&x| f(x, db[0])).collect()),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op(a, b, bc), rg))
    }

    /// Elementwise sum; a rank-0 operand broadcasts against the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_value);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[batch, m, k] · [batch, k, n] → [batch, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(bt * m * n);
        for i in 0..bt {
            out.extend(matmul_nn(&da[i * m * k..(i + 1) * m * k], &db[i * k * n..(i + 1) * k * n], m, k, n));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bt, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Row-wise affine map `x · Wᵀ + b` over the last axis; `W` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[1] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let rows = numel(&sx) / in_dim;
        let wt = transpose(self.data(w), out_dim, in_dim);
        let mut out = matmul_nn(self.data(x), &wt, rows, in_dim, out_dim);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    // ---- normalisation -----------------------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        if n == 0 {
            return Err(Error::invalid("softmax", "empty last axis"));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Per-row normalisation over the last axis followed by `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::shape("layer_norm params", self.shape(gamma), &[dim]));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let inv_n = S::one() / S::from_usize(dim);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut out = Vec::with_capacity(numel(&shape));
        let mut rstds = Vec::with_capacity(numel(&shape) / dim.max(1));
        for row in self.data(x).chunks(dim) {
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rstd = S::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * rstd * g[j] + bt[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd: rstds,
            },
            rg,
        ))
    }

    // ---- index remaps ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !is_permutation(perm, shape.len()) {
            return Err(Error::invalid("permute", format!("{:?} is not a permutation of rank {}", perm, shape.len())));
        }
        let (data, out_shape) = permute_data(self.data(x), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid("narrow", format!("axis {} range {}..{} of {:?}", axis, start, start + len, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            lead += s[0];
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.data(x).iter().copied().sum::<S>() / S::from_usize(n);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- volumetric --------------------------------------------------------

    /// 3D convolution of a `[C, D, H, W]` volume with weight `[out, C/groups, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(Error::invalid("conv3d", format!("input must be [C, D, H, W], got {:?}", sx)));
        }
        if sw.len() != 5 || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(Error::invalid("conv3d", format!("weight must be [out, in/groups, k, k, k], got {:?}", sw)));
        }
        let (in_ch, out_ch, k) = (sx[0], sw[0], sw[2]);
        let g = spec.groups;
        if g == 0 || in_ch % g != 0 || out_ch % g != 0 || sw[1] * g != in_ch {
            return Err(Error::invalid(
                "conv3d",
                format!("channels in={} out={} weight {:?} incompatible with groups={}", in_ch, out_ch, sw, g),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape("conv3d bias", self.shape(b), &[out_ch]));
            }
        }
        let input = [sx[1], sx[2], sx[3]];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv::output_extent(input[a], k, spec.stride, spec.padding).ok_or_else(|| {
                Error::invalid(
                    "conv3d",
                    format!("kernel {} stride {} padding {} does not fit input {:?}", k, spec.stride, spec.padding, input),
                )
            })?;
        }
        let geo = ConvGeometry {
            in_channels: in_ch,
            out_channels: out_ch,
            groups: g,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            input,
            output,
        };
        let out = conv::conv3d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geo);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let shape = vec![out_ch, output[0], output[1], output[2]];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv3d { x, w, b, geo }, rg))
    }

    /// Transposed convolution with kernel == stride; weight `[C, out, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 || sw[0] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(Error::shape("conv_transpose3d", &sx, &sw));
        }
        let geo = TransposeGeometry {
            in_channels: sx[0],
            out_channels: sw[1],
            kernel: sw[2],
            input: [sx[1], sx[2], sx[3]],
        };
        if let Some(b) = b {
            if self.shape(b) != [geo.out_channels] {
                return Err(Error::shape("conv_transpose3d bias", self.shape(b), &[geo.out_channels]));
            }
        }
        let out = conv::conv_transpose3d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geo);
        let o = geo.output();
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(vec![geo.out_channels, o[0], o[1], o[2]], out)?,
            Op::ConvTranspose3d { x, w, b, geo },
            rg,
        ))
    }

    /// Trilinear resampling `out(p) = image(p + field(p))`, coordinates clamped to the volume.
    /// `image` is `[C, D, H, W]`, `field` is `[3, D, H, W]` in voxel units along (d, h, w).
    pub fn warp(&mut self, image: Var, field: Var) -> Result<Var> {
        let si = self.shape(image).to_vec();
        let sf = self.shape(field).to_vec();
        if si.len() != 4 || sf.len() != 4 || sf[0] != 3 || si[1..] != sf[1..] {
            return Err(Error::shape("warp", &si, &sf));
        }
        if !self.value(field).is_finite() {
            return Err(Error::NonFinite("warp field".into()));
        }
        let dims = [si[1], si[2], si[3]];
        let out = warp::warp_forward(self.data(image), si[0], dims, self.data(field));
        let rg = self.rg(&[image, field]);
        Ok(self.push(Tensor::new(si, out)?, Op::Warp { image, field }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that requires them.
    /// Previously stored gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.contributions(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![S::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<S>) {
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            None => node.grad = Some(contrib),
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
        }
    }

    fn contributions(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let mut out: Vec<(Var, Vec<S>)> = Vec::new();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b, bc) => {
                if want(a) {
                    out.push((a, reduce_bcast(g.to_vec(), bc == Bcast::Lhs)));
                }
                if want(b) {
                    out.push((b, reduce_bcast(g.to_vec(), bc == Bcast::Rhs)));
                }
            }
            &Op::Sub(a, b, bc) => {
                if want(a) {
                    out.push((a, reduce_bcast(g.to_vec(), bc == Bcast::Lhs)));
                }
                if want(b) {
                    out.push((b, reduce_bcast(g.iter().map(|&v| -v).collect(), bc == Bcast::Rhs)));
                }
            }
            &Op::Mul(a, b, bc) => {
                let (da, db) = (self.data(a), self.data(b));
                let pick = |d: &[S], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                if want(a) {
                    let c = g.iter().enumerate().map(|(j, &gv)| gv * pick(db, j)).collect();
                    out.push((a, reduce_bcast(c, bc == Bcast::Lhs)));
                }
                if want(b) {
                    let c = g.iter().enumerate().map(|(j, &gv)| gv * pick(da, j)).collect();
                    out.push((b, reduce_bcast(c, bc == Bcast::Rhs)));
                }
            }
            &Op::Scale(a, c) => out.push((a, g.iter().map(|&v| v * c).collect())),
            &Op::AddScalar(a) => out.push((a, g.to_vec())),
            &Op::LeakyRelu(a, slope) => {
                let x = self.data(a);
                out.push((a, g.iter().zip(x).map(|(&gv, &xv)| if xv > S::zero() { gv } else { gv * slope }).collect()));
            }
            &Op::Gelu(a) => {
                let x = self.data(a);
                out.push((a, g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect()));
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(self.data(b), k, n);
                    out.push((a, matmul_nn(g, &bt, m, n, k)));
                }
                if want(b) {
                    // dB = Aᵀ · dC
                    let at = transpose(self.data(a), m, k);
                    out.push((b, matmul_nn(&at, g, k, m, n)));
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(a), self.data(b));
                if want(a) {
                    let mut ga = Vec::with_capacity(bt * m * k);
                    for i in 0..bt {
                        let btr = transpose(&db[i * k * n..(i + 1) * k * n], k, n);
                        ga.extend(matmul_nn(&g[i * m * n..(i + 1) * m * n], &btr, m, n, k));
                    }
                    out.push((a, ga));
                }
                if want(b) {
                    let mut gb = Vec::with_capacity(bt * k * n);
                    for i in 0..bt {
                        let atr = transpose(&da[i * m * k..(i + 1) * m * k], m, k);
                        gb.extend(matmul_nn(&atr, &g[i * m * n..(i + 1) * m * n], k, m, n));
                    }
                    out.push((b, gb));
                }
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    ga.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                out.push((a, ga));
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let dim = *self.shape(x).last().unwrap();
                let xd = self.data(x);
                let gm = self.data(gamma);
                let inv_n = S::one() / S::from_usize(dim);
                let mut gx = want(x).then(|| Vec::with_capacity(xd.len()));
                let mut gg = vec![S::zero(); dim];
                let mut gbv = vec![S::zero(); dim];
                let mut xhat = vec![S::zero(); dim];
                let mut dxhat = vec![S::zero(); dim];
                for ((row, gr), &rs) in xd.chunks(dim).zip(g.chunks(dim)).zip(rstd) {
                    let mean = row.iter().copied().sum::<S>() * inv_n;
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..dim {
                        xhat[j] = (row[j] - mean) * rs;
                        dxhat[j] = gr[j] * gm[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                        gg[j] += gr[j] * xhat[j];
                        gbv[j] += gr[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let (m1, m2) = (s1 * inv_n, s2 * inv_n);
                        for j in 0..dim {
                            gx.push(rs * (dxhat[j] - m1 - xhat[j] * m2));
                        }
                    }
                }
                if let Some(gx) = gx {
                    out.push((x, gx));
                }
                if want(gamma) {
                    out.push((gamma, gg));
                }
                if want(beta) {
                    out.push((beta, gbv));
                }
            }
            &Op::Reshape(a) => out.push((a, g.to_vec())),
            Op::Permute(a, perm) => {
                let (data, _) = permute_data(g, node.value.shape(), &inverse_permutation(perm));
                out.push((*a, data));
            }
            &Op::Narrow { x, axis, start } => {
                let shape = self.shape(x);
                let len = node.value.shape()[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = vec![S::zero(); self.value(x).len()];
                for o in 0..outer {
                    let dst = (o * shape[axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                out.push((x, gx));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if want(p) {
                        out.push((p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            &Op::Sum(a) => out.push((a, vec![g[0]; self.value(a).len()])),
            &Op::Mean(a) => {
                let n = self.value(a).len();
                out.push((a, vec![g[0] / S::from_usize(n.max(1)); n]));
            }
            &Op::Linear { x, w, b } => {
                let sw = self.shape(w);
                let (out_dim, in_dim) = (sw[0], sw[1]);
                let rows = g.len() / out_dim;
                if want(x) {
                    // dX = dY · W
                    out.push((x, matmul_nn(g, self.data(w), rows, out_dim, in_dim)));
                }
                if want(w) {
                    // dW = dYᵀ · X
                    let gt = transpose(g, rows, out_dim);
                    out.push((w, matmul_nn(&gt, self.data(x), out_dim, rows, in_dim)));
                }
                if let Some(b) = b {
                    if want(b) {
                        let mut gb = vec![S::zero(); out_dim];
                        for row in g.chunks(out_dim) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        out.push((b, gb));
                    }
                }
            }
            &Op::Conv3d { x, w, b, ref geo } => {
                let need = [want(x), want(w), b.is_some_and(want)];
                let grads = conv::conv3d_backward(self.data(x), self.data(w), g, geo, need);
                push_conv_grads(&mut out, x, w, b, grads);
            }
            &Op::ConvTranspose3d { x, w, b, ref geo } => {
                let need = [want(x), want(w), b.is_some_and(want)];
                let grads = conv::conv_transpose3d_backward(self.data(x), self.data(w), g, geo, need);
                push_conv_grads(&mut out, x, w, b, grads);
            }
            &Op::Warp { image, field } => {
                let si = self.shape(image);
                let dims = [si[1], si[2], si[3]];
                let (gi, gf) = warp::warp_backward(self.data(image), si[0], dims, self.data(field), g, [want(image), want(field)]);
                if let Some(gi) = gi {
                    out.push((image, gi));
                }
                if let Some(gf) = gf {
                    out.push((field, gf));
                }
            }
        }
        out
    }
}

fn push_conv_grads<S>(out: &mut Vec<(Var, Vec<S>)>, x: Var, w: Var, b: Option<Var>, grads: conv::ConvGrads<S>) {
    if let Some(gx) = grads.input {
        out.push((x, gx));
    }
    if let Some(gw) = grads.weight {
        out.push((w, gw));
    }
    if let (Some(b), Some(gb)) = (b, grads.bias) {
        out.push((b, gb));
    }
}

fn reduce_bcast<S: Scalar>(g: Vec<S>, to_scalar: bool) -> Vec<S> {
    if to_scalar {
        vec![g.iter().copied().sum()]
    } else {
        g
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh_m())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh_m();
    let three = S::from_f64(3.0);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp_m();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `[m, k] · [k, n]`, i-k-j loop order.
fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
