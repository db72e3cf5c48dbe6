//! Minimal reverse-mode differentiation engine over [`Grid`] values.
//!
//! A [`Tape`] records coarse-grained operations (whole convolutions, warps,
//! reductions), each with a hand-written backward rule. Nodes are appended in
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Parameters are named leaves; everything
//! inserted with [`Tape::constant`] is treated as data and never receives a
//! gradient (this is how stop-gradients and frozen networks are expressed).

use crate::conv::{self, ConvDims};
use crate::error::{Error, Result};
use crate::grid::{Grid, Scalar};
use crate::sampling;
use std::collections::BTreeMap;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Sum,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        dims: ConvDims,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Sigmoid {
        input: NodeId,
    },
    Log {
        input: NodeId,
    },
    Square {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Sub {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Div {
        lhs: NodeId,
        rhs: NodeId,
    },
    Affine {
        input: NodeId,
        scale: T,
    },
    SoftmaxChannel {
        input: NodeId,
    },
    ChannelSum {
        input: NodeId,
    },
    RenormChannels {
        input: NodeId,
    },
    Reduce {
        input: NodeId,
        mode: ReduceMode,
    },
    ResizeNearestDouble {
        input: NodeId,
    },
    AvgPool2 {
        input: NodeId,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    WarpImage {
        image: NodeId,
        field: NodeId,
    },
    Smoothness {
        field: NodeId,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Grid<T>,
    requires_grad: bool,
}

/// Recording tape; build one per forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

/// Small epsilon used by [`Tape::renorm_channels`] to keep the per-pixel
/// channel sum away from zero.
const RENORM_TINY: f64 = 1e-7;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Grid<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0 as usize].requires_grad
    }

    /// Value produced at `id`.
    pub fn value(&self, id: NodeId) -> &Grid<T> {
        &self.nodes[id.0 as usize].value
    }

    /// Scalar value of a `[1]`-shaped node, as f64.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        Ok(self.value(id).scalar()?.to_f64())
    }

    /// Inserts a named, differentiable parameter leaf.
    pub fn leaf(&mut self, name: &str, value: Grid<T>) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::domain(
                "leaf",
                format!("duplicate parameter name '{name}' on tape"),
            ));
        }
        let id = self.push(Op::Leaf, value, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Inserts a non-differentiable value (data, frozen parameters,
    /// detached activations).
    pub fn constant(&mut self, value: Grid<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Re-inserts the value at `id` as a constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let dims = conv::conv_dims(
            self.value(input),
            self.value(weights),
            self.value(bias),
            stride,
            padding,
        )?;
        let out = conv::forward(self.value(input), self.value(weights), self.value(bias), &dims);
        let rg = self.requires(input) || self.requires(weights) || self.requires(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                weights,
                bias,
                dims,
            },
            out,
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let out = self
            .value(input)
            .map(|v| if v > T::ZERO { v } else { s * v });
        let rg = self.requires(input);
        self.push(Op::LeakyRelu { input, slope: s }, out, rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| {
            let e = (-v).exp();
            T::ONE / (T::ONE + e)
        });
        let rg = self.requires(input);
        self.push(Op::Sigmoid { input }, out, rg)
    }

    /// Natural log; the input must be strictly positive (callers add their
    /// epsilon before taking the log).
    pub fn log(&mut self, input: NodeId) -> Result<NodeId> {
        if let Some(pos) = self
            .value(input)
            .data()
            .iter()
            .position(|&v| v <= T::ZERO)
        {
            return Err(Error::domain(
                "log",
                format!(
                    "non-positive input {} at flat index {pos}",
                    self.value(input).data()[pos]
                ),
            ));
        }
        let out = self.value(input).map(|v| v.ln());
        let rg = self.requires(input);
        Ok(self.push(Op::Log { input }, out, rg))
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v * v);
        let rg = self.requires(input);
        self.push(Op::Square { input }, out, rg)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let out = self.value(lhs).zip_map(self.value(rhs), "add", |a, b| a + b)?;
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(Op::Add { lhs, rhs }, out, rg))
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let out = self.value(lhs).zip_map(self.value(rhs), "sub", |a, b| a - b)?;
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(Op::Sub { lhs, rhs }, out, rg))
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let out = self.value(lhs).zip_map(self.value(rhs), "mul", |a, b| a * b)?;
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(Op::Mul { lhs, rhs }, out, rg))
    }

    /// Elementwise division; callers keep denominators bounded away from zero.
    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let out = self.value(lhs).zip_map(self.value(rhs), "div", |a, b| a / b)?;
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(Op::Div { lhs, rhs }, out, rg))
    }

    /// `scale * x + offset`, elementwise with constants.
    pub fn affine(&mut self, input: NodeId, scale: f64, offset: f64) -> NodeId {
        let s = T::from_f64(scale);
        let o = T::from_f64(offset);
        let out = self.value(input).map(|v| s * v + o);
        let rg = self.requires(input);
        self.push(Op::Affine { input, scale: s }, out, rg)
    }

    /// Per-pixel softmax across the channel axis of a `[C,H,W]` grid,
    /// max-subtracted for stability.
    pub fn softmax_channel(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.rank() != 3 || v.shape()[0] < 2 {
            return Err(Error::shape(
                "softmax_channel",
                format!("expected [C>=2,H,W], got {:?}", v.shape()),
            ));
        }
        let (c_n, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let hw = h * w;
        let src = v.data();
        let mut out = Grid::zeros(v.shape());
        let dst = out.data_mut();
        for p in 0..hw {
            let mut m = src[p];
            for c in 1..c_n {
                m = m.maximum(src[c * hw + p]);
            }
            let mut denom = T::ZERO;
            for c in 0..c_n {
                let e = (src[c * hw + p] - m).exp();
                dst[c * hw + p] = e;
                denom += e;
            }
            for c in 0..c_n {
                dst[c * hw + p] /= denom;
            }
        }
        let rg = self.requires(input);
        Ok(self.push(Op::SoftmaxChannel { input }, out, rg))
    }

    /// Sums a `[C,H,W]` grid over channels into `[1,H,W]`.
    pub fn channel_sum(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.rank() != 3 {
            return Err(Error::shape(
                "channel_sum",
                format!("expected [C,H,W], got {:?}", v.shape()),
            ));
        }
        let (c_n, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let hw = h * w;
        let src = v.data();
        let mut out = Grid::zeros(&[1, h, w]);
        let dst = out.data_mut();
        for c in 0..c_n {
            for p in 0..hw {
                dst[p] += src[c * hw + p];
            }
        }
        let rg = self.requires(input);
        Ok(self.push(Op::ChannelSum { input }, out, rg))
    }

    /// Rescales each pixel of a non-negative `[C,H,W]` grid so the channels
    /// sum to one (soft-label renormalization after warping).
    pub fn renorm_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.rank() != 3 {
            return Err(Error::shape(
                "renorm_channels",
                format!("expected [C,H,W], got {:?}", v.shape()),
            ));
        }
        let (c_n, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let hw = h * w;
        let tiny = T::from_f64(RENORM_TINY);
        let src = v.data();
        let mut out = Grid::zeros(v.shape());
        let dst = out.data_mut();
        for p in 0..hw {
            let mut s = tiny;
            for c in 0..c_n {
                s += src[c * hw + p];
            }
            for c in 0..c_n {
                dst[c * hw + p] = src[c * hw + p] / s;
            }
        }
        let rg = self.requires(input);
        Ok(self.push(Op::RenormChannels { input }, out, rg))
    }

    pub fn reduce(&mut self, input: NodeId, mode: ReduceMode) -> Result<NodeId> {
        let v = self.value(input);
        if v.is_empty() {
            return Err(Error::shape("reduce", "empty input rejected".to_string()));
        }
        let mut acc = T::ZERO;
        for &x in v.data() {
            acc += x;
        }
        if mode == ReduceMode::Mean {
            acc /= T::from_f64(v.len() as f64);
        }
        let rg = self.requires(input);
        Ok(self.push(Op::Reduce { input, mode }, Grid::scalar_grid(acc), rg))
    }

    pub fn reduce_mean(&mut self, input: NodeId) -> Result<NodeId> {
        self.reduce(input, ReduceMode::Mean)
    }

    pub fn reduce_sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.reduce(input, ReduceMode::Sum)
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` grid.
    pub fn resize_nearest_double(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.rank() != 3 {
            return Err(Error::shape(
                "resize_nearest_double",
                format!("expected [C,H,W], got {:?}", v.shape()),
            ));
        }
        let (c_n, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let src = v.data();
        let mut out = Grid::zeros(&[c_n, 2 * h, 2 * w]);
        let dst = out.data_mut();
        let w2 = 2 * w;
        for c in 0..c_n {
            for i in 0..h {
                let srow = &src[(c * h + i) * w..(c * h + i) * w + w];
                let d0 = (c * 2 * h + 2 * i) * w2;
                for (j, &x) in srow.iter().enumerate() {
                    dst[d0 + 2 * j] = x;
                    dst[d0 + 2 * j + 1] = x;
                }
                let (a, b) = dst.split_at_mut(d0 + w2);
                b[..w2].copy_from_slice(&a[d0..d0 + w2]);
            }
        }
        let rg = self.requires(input);
        Ok(self.push(Op::ResizeNearestDouble { input }, out, rg))
    }

    /// 2x2 average pooling with stride 2; the downsampling inverse of
    /// [`Tape::resize_nearest_double`]. Requires even height and width.
    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.rank() != 3 || v.shape()[1] % 2 != 0 || v.shape()[2] % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("expected [C,2m,2n], got {:?}", v.shape()),
            ));
        }
        let (c_n, h, w) = (v.shape()[0], v.shape()[1] / 2, v.shape()[2] / 2);
        let src = v.data();
        let w2 = 2 * w;
        let quarter = T::from_f64(0.25);
        let mut out = Grid::zeros(&[c_n, h, w]);
        let dst = out.data_mut();
        for c in 0..c_n {
            for i in 0..h {
                let r0 = (c * 2 * h + 2 * i) * w2;
                let r1 = r0 + w2;
                let drow = &mut dst[(c * h + i) * w..(c * h + i) * w + w];
                for (j, o) in drow.iter_mut().enumerate() {
                    *o = (src[r0 + 2 * j] + src[r0 + 2 * j + 1] + src[r1 + 2 * j]
                        + src[r1 + 2 * j + 1])
                        * quarter;
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(Op::AvgPool2 { input }, out, rg))
    }

    /// Concatenates `[C_i,H,W]` grids along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs".to_string()));
        }
        let first = self.value(inputs[0]);
        if first.rank() != 3 {
            return Err(Error::shape(
                "concat_channels",
                format!("expected [C,H,W], got {:?}", first.shape()),
            ));
        }
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut c_total = 0;
        for &id in inputs {
            let v = self.value(id);
            if v.rank() != 3 || v.shape()[1] != h || v.shape()[2] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial mismatch: {:?} vs [_, {h}, {w}]", v.shape()),
                ));
            }
            c_total += v.shape()[0];
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &id in inputs {
            data.extend_from_slice(self.value(id).data());
        }
        let out = Grid::new(vec![c_total, h, w], data)?;
        let rg = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            out,
            rg,
        ))
    }

    /// Bilinear warp of `[C,H,W]` image by a `[2,H,W]` displacement field.
    pub fn warp_image(&mut self, image: NodeId, field: NodeId) -> Result<NodeId> {
        let img = self.value(image);
        let f = self.value(field);
        if img.rank() != 3 {
            return Err(Error::shape(
                "warp_image",
                format!("image must be [C,H,W], got {:?}", img.shape()),
            ));
        }
        if f.rank() != 3
            || f.shape()[0] != 2
            || f.shape()[1] != img.shape()[1]
            || f.shape()[2] != img.shape()[2]
        {
            return Err(Error::shape(
                "warp_image",
                format!(
                    "field must be [2,{},{}], got {:?}",
                    img.shape()[1],
                    img.shape()[2],
                    f.shape()
                ),
            ));
        }
        let out = sampling::warp_forward(img, f);
        let rg = self.requires(image) || self.requires(field);
        Ok(self.push(Op::WarpImage { image, field }, out, rg))
    }

    /// Mean squared forward difference of each channel of a `[2,H,W]` field.
    pub fn smoothness(&mut self, field: NodeId) -> Result<NodeId> {
        let v = self.value(field);
        if v.rank() != 3 {
            return Err(Error::shape(
                "smoothness",
                format!("expected [C,H,W] field, got {:?}", v.shape()),
            ));
        }
        let (c_n, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let f = v.data();
        let hw = h * w;
        let mut acc = T::ZERO;
        for c in 0..c_n {
            let plane = &f[c * hw..(c + 1) * hw];
            for i in 0..h - 1 {
                for j in 0..w {
                    let d = plane[(i + 1) * w + j] - plane[i * w + j];
                    acc += d * d;
                }
            }
            for i in 0..h {
                for j in 0..w - 1 {
                    let d = plane[i * w + j + 1] - plane[i * w + j];
                    acc += d * d;
                }
            }
        }
        let count = c_n * ((h - 1) * w + h * (w - 1));
        let out = Grid::scalar_grid(acc / T::from_f64(count as f64));
        let rg = self.requires(field);
        Ok(self.push(Op::Smoothness { field }, out, rg))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// reachable differentiable node; named parameters that are unreachable
    /// report zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Grid<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0 as usize].requires_grad {
            grads[loss.0 as usize] = Some(Grid::scalar_grid(T::ONE));
        }

        for idx in (0..=loss.0 as usize).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (name, &id) in &self.params {
            let grad = match &grads[id.0 as usize] {
                Some(g) => g.clone(),
                None => Grid::zeros(self.value(id).shape()),
            };
            by_name.insert(name.clone(), grad);
        }
        Ok(Gradients { by_node: grads, by_name })
    }

    fn accumulate(&self, grads: &mut [Option<Grid<T>>], id: NodeId, delta: Grid<T>) {
        if !self.requires(id) {
            return;
        }
        let slot = &mut grads[id.0 as usize];
        match slot {
            Some(g) => {
                let gd = g.data_mut();
                for (a, b) in gd.iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Grid<T>, grads: &mut [Option<Grid<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                dims,
            } => {
                let (gin, gw, gb) =
                    conv::backward(self.value(*input), self.value(*weights), g, dims);
                self.accumulate(grads, *input, gin);
                self.accumulate(grads, *weights, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                let s = *slope;
                let delta = Grid::from_fn(x.shape(), |i| {
                    let xv = x.data()[i];
                    let gv = g.data()[i];
                    if xv > T::ZERO {
                        gv
                    } else {
                        gv * s
                    }
                });
                self.accumulate(grads, *input, delta);
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let delta = Grid::from_fn(y.shape(), |i| {
                    let yv = y.data()[i];
                    g.data()[i] * yv * (T::ONE - yv)
                });
                self.accumulate(grads, *input, delta);
            }
            Op::Log { input } => {
                let x = self.value(*input);
                let delta = Grid::from_fn(x.shape(), |i| g.data()[i] / x.data()[i]);
                self.accumulate(grads, *input, delta);
            }
            Op::Square { input } => {
                let x = self.value(*input);
                let two = T::from_f64(2.0);
                let delta = Grid::from_fn(x.shape(), |i| two * g.data()[i] * x.data()[i]);
                self.accumulate(grads, *input, delta);
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, *lhs, g.clone());
                self.accumulate(grads, *rhs, g.clone());
            }
            Op::Sub { lhs, rhs } => {
                self.accumulate(grads, *lhs, g.clone());
                self.accumulate(grads, *rhs, g.map(|v| -v));
            }
            Op::Mul { lhs, rhs } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                let da = Grid::from_fn(a.shape(), |i| g.data()[i] * b.data()[i]);
                let db = Grid::from_fn(b.shape(), |i| g.data()[i] * a.data()[i]);
                self.accumulate(grads, *lhs, da);
                self.accumulate(grads, *rhs, db);
            }
            Op::Div { lhs, rhs } => {
                let b = self.value(*rhs);
                let y = &node.value;
                let da = Grid::from_fn(b.shape(), |i| g.data()[i] / b.data()[i]);
                let db = Grid::from_fn(b.shape(), |i| {
                    -g.data()[i] * y.data()[i] / b.data()[i]
                });
                self.accumulate(grads, *lhs, da);
                self.accumulate(grads, *rhs, db);
            }
            Op::Affine { input, scale, .. } => {
                let s = *scale;
                let delta = g.map(|v| v * s);
                self.accumulate(grads, *input, delta);
            }
            Op::SoftmaxChannel { input } => {
                let y = &node.value;
                let (c_n, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let hw = h * w;
                let mut delta = Grid::zeros(y.shape());
                let d = delta.data_mut();
                let yd = y.data();
                let gd = g.data();
                for p in 0..hw {
                    let mut dot = T::ZERO;
                    for c in 0..c_n {
                        dot += gd[c * hw + p] * yd[c * hw + p];
                    }
                    for c in 0..c_n {
                        d[c * hw + p] = yd[c * hw + p] * (gd[c * hw + p] - dot);
                    }
                }
                self.accumulate(grads, *input, delta);
            }
            Op::ChannelSum { input } => {
                let x = self.value(*input);
                let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hw = h * w;
                let mut delta = Grid::zeros(x.shape());
                let d = delta.data_mut();
                for c in 0..c_n {
                    d[c * hw..(c + 1) * hw].copy_from_slice(&g.data()[..hw]);
                }
                self.accumulate(grads, *input, delta);
            }
            Op::RenormChannels { input } => {
                let x = self.value(*input);
                let y = &node.value;
                let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hw = h * w;
                let tiny = T::from_f64(RENORM_TINY);
                let mut delta = Grid::zeros(x.shape());
                let d = delta.data_mut();
                let xd = x.data();
                let yd = y.data();
                let gd = g.data();
                for p in 0..hw {
                    let mut s = tiny;
                    let mut dot = T::ZERO;
                    for c in 0..c_n {
                        s += xd[c * hw + p];
                        dot += gd[c * hw + p] * yd[c * hw + p];
                    }
                    for c in 0..c_n {
                        d[c * hw + p] = (gd[c * hw + p] - dot) / s;
                    }
                }
                self.accumulate(grads, *input, delta);
            }
            Op::Reduce { input, mode } => {
                let x = self.value(*input);
                let gv = g.data()[0];
                let v = match mode {
                    ReduceMode::Sum => gv,
                    ReduceMode::Mean => gv / T::from_f64(x.len() as f64),
                };
                self.accumulate(grads, *input, Grid::full(x.shape(), v));
            }
            Op::ResizeNearestDouble { input } => {
                let x = self.value(*input);
                let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut delta = Grid::zeros(x.shape());
                let d = delta.data_mut();
                let gd = g.data();
                let w2 = 2 * w;
                for c in 0..c_n {
                    for i in 0..h {
                        for j in 0..w {
                            let g00 = (c * 2 * h + 2 * i) * w2 + 2 * j;
                            let g10 = g00 + w2;
                            d[(c * h + i) * w + j] =
                                gd[g00] + gd[g00 + 1] + gd[g10] + gd[g10 + 1];
                        }
                    }
                }
                self.accumulate(grads, *input, delta);
            }
            Op::AvgPool2 { input } => {
                let x = self.value(*input);
                let (c_n, h2, w2) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (h, w) = (h2 / 2, w2 / 2);
                let quarter = T::from_f64(0.25);
                let mut delta = Grid::zeros(x.shape());
                let d = delta.data_mut();
                let gd = g.data();
                for c in 0..c_n {
                    for i in 0..h {
                        let r0 = (c * h2 + 2 * i) * w2;
                        let r1 = r0 + w2;
                        let grow = &gd[(c * h + i) * w..(c * h + i) * w + w];
                        for (j, &gv) in grow.iter().enumerate() {
                            let q = gv * quarter;
                            d[r0 + 2 * j] = q;
                            d[r0 + 2 * j + 1] = q;
                            d[r1 + 2 * j] = q;
                            d[r1 + 2 * j + 1] = q;
                        }
                    }
                }
                self.accumulate(grads, *input, delta);
            }
            Op::ConcatChannels { inputs } => {
                let (h, w) = (node.value.shape()[1], node.value.shape()[2]);
                let hw = h * w;
                let mut offset = 0;
                for &id in inputs {
                    let c_i = self.value(id).shape()[0];
                    let delta = Grid::new(
                        vec![c_i, h, w],
                        g.data()[offset..offset + c_i * hw].to_vec(),
                    )
                    .expect("concat slice shape");
                    self.accumulate(grads, id, delta);
                    offset += c_i * hw;
                }
            }
            Op::WarpImage { image, field } => {
                let (gimg, gfield) =
                    sampling::warp_backward(self.value(*image), self.value(*field), g);
                self.accumulate(grads, *image, gimg);
                self.accumulate(grads, *field, gfield);
            }
            Op::Smoothness { field } => {
                let v = self.value(*field);
                let (c_n, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                let f = v.data();
                let hw = h * w;
                let count = c_n * ((h - 1) * w + h * (w - 1));
                let scale = g.data()[0] * T::from_f64(2.0 / count as f64);
                let mut delta = Grid::zeros(v.shape());
                let d = delta.data_mut();
                for c in 0..c_n {
                    let base = c * hw;
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let diff = f[base + (i + 1) * w + j] - f[base + i * w + j];
                            d[base + (i + 1) * w + j] += scale * diff;
                            d[base + i * w + j] -= scale * diff;
                        }
                    }
                    for i in 0..h {
                        for j in 0..w - 1 {
                            let diff = f[base + i * w + j + 1] - f[base + i * w + j];
                            d[base + i * w + j + 1] += scale * diff;
                            d[base + i * w + j] -= scale * diff;
                        }
                    }
                }
                self.accumulate(grads, *field, delta);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Grid<T>>>,
    by_name: BTreeMap<String, Grid<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. an arbitrary differentiable node, if it was reached.
    pub fn wrt(&self, id: NodeId) -> Option<&Grid<T>> {
        self.by_node.get(id.0 as usize).and_then(|g| g.as_ref())
    }

    /// Gradient per named parameter; zero grids for unreachable parameters.
    pub fn by_name(&self) -> &BTreeMap<String, Grid<T>> {
        &self.by_name
    }

    pub fn named(&self, name: &str) -> Option<&Grid<T>> {
        self.by_name.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g1(values: &[f64]) -> Grid<f64> {
        Grid::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_definitions() {
        let mut t = Tape::new();
        let x = t.constant(g1(&[-1.0, 0.0, 3.0]));
        let lr = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(lr).data(), &[-0.2, 0.0, 3.0]);
        let sg = t.sigmoid(x);
        assert!((t.value(sg).data()[1] - 0.5).abs() < 1e-15);
        let sq = t.square(x);
        assert_eq!(t.value(sq).data(), &[1.0, 0.0, 9.0]);
    }

    #[test]
    fn log_rejects_nonpositive_and_names_op() {
        let mut t = Tape::new();
        let x = t.constant(g1(&[0.5, 0.0]));
        let err = t.log(x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("log") && msg.contains("index 1"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_saturation_closed_form() {
        let mut t = Tape::<f64>::new();
        let eq = t.constant(Grid::full(&[4, 1, 1], 1.7));
        let s = t.softmax_channel(eq).unwrap();
        for &v in t.value(s).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let hot = t.constant(Grid::new(vec![2, 1, 1], vec![0.0, 1000.0]).unwrap());
        let s2 = t.softmax_channel(hot).unwrap();
        assert!(t.value(s2).data()[0] < 1e-6);
        assert!((t.value(s2).data()[1] - 1.0).abs() < 1e-6);

        let ln3 = t.constant(Grid::new(vec![2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        let s3 = t.softmax_channel(ln3).unwrap();
        assert!((t.value(s3).data()[0] - 0.25).abs() < 1e-12);
        assert!((t.value(s3).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_for_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits = Grid::from_fn(&[5, 3, 3], |_| rng.gen_range(-30.0..30.0));
            let mut t = Tape::new();
            let x = t.constant(logits);
            let s = t.softmax_channel(x).unwrap();
            let v = t.value(s);
            for p in 0..9 {
                let sum: f64 = (0..5).map(|c| v.data()[c * 9 + p]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
            }
        }
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::new();
        let x = t.constant(g1(&[1.0, 2.0, 3.0]));
        let m = t.reduce_mean(x).unwrap();
        assert_eq!(t.scalar(m).unwrap(), 2.0);
        let z = t.constant(Grid::zeros(&[4]));
        let s = t.reduce_sum(z).unwrap();
        assert_eq!(t.scalar(s).unwrap(), 0.0);
        let one = t.constant(g1(&[0.731]));
        let m1 = t.reduce_mean(one).unwrap();
        assert_eq!(t.scalar(m1).unwrap(), 0.731);
    }

    /// 2x2 average pooling, the test-side inverse of nearest doubling.
    fn avg_pool_2x2(g: &Grid<f64>) -> Grid<f64> {
        let (c_n, h, w) = (g.shape()[0], g.shape()[1] / 2, g.shape()[2] / 2);
        Grid::from_fn(&[c_n, h, w], |i| {
            let c = i / (h * w);
            let r = (i / w) % h;
            let col = i % w;
            (g.at3(c, 2 * r, 2 * col)
                + g.at3(c, 2 * r, 2 * col + 1)
                + g.at3(c, 2 * r + 1, 2 * col)
                + g.at3(c, 2 * r + 1, 2 * col + 1))
                / 4.0
        })
    }

    #[test]
    fn resize_nearest_double_examples() {
        let mut t = Tape::new();
        let x = t.constant(Grid::new(vec![1, 1, 1], vec![7.0]).unwrap());
        let up = t.resize_nearest_double(x).unwrap();
        assert_eq!(t.value(up).shape(), &[1, 2, 2]);
        assert_eq!(t.value(up).data(), &[7.0, 7.0, 7.0, 7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let orig = Grid::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let mut t2 = Tape::new();
        let x2 = t2.constant(orig.clone());
        let up2 = t2.resize_nearest_double(x2).unwrap();
        let pooled = avg_pool_2x2(t2.value(up2));
        assert_eq!(pooled.data(), orig.data());
        let down = t2.avg_pool2(up2).unwrap();
        assert_eq!(t2.value(down).data(), orig.data());

        // Gradient of the sum of the doubled grid is the replication count.
        let mut t3 = Tape::new();
        let p = t3.leaf("p", orig).unwrap();
        let up3 = t3.resize_nearest_double(p).unwrap();
        let loss = t3.reduce_sum(up3).unwrap();
        let grads = t3.backward(loss).unwrap();
        for &v in grads.named("p").unwrap().data() {
            assert_eq!(v, 4.0);
        }
    }

    #[test]
    fn backward_examples() {
        // loss = mean(square(p)) with p = [2, -2] -> grad [2, -2]
        let mut t = Tape::new();
        let p = t.leaf("p", g1(&[2.0, -2.0])).unwrap();
        let sq = t.square(p);
        let loss = t.reduce_mean(sq).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.named("p").unwrap().data(), &[2.0, -2.0]);

        // Loss independent of q -> zero gradient for q.
        let mut t = Tape::new();
        let p = t.leaf("p", g1(&[1.0])).unwrap();
        let _q = t.leaf("q", g1(&[5.0, 6.0])).unwrap();
        let loss = t.reduce_mean(p).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.named("q").unwrap().data(), &[0.0, 0.0]);

        // loss = sum(p*q), p=[1,2], q=[3,4] -> grad_p=[3,4], grad_q=[1,2]
        let mut t = Tape::new();
        let p = t.leaf("p", g1(&[1.0, 2.0])).unwrap();
        let q = t.leaf("q", g1(&[3.0, 4.0])).unwrap();
        let prod = t.mul(p, q).unwrap();
        let loss = t.reduce_sum(prod).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.named("p").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.named("q").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let p = t.leaf("p", g1(&[1.0, 2.0])).unwrap();
        let sq = t.square(p);
        assert!(t.backward(sq).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pv = Grid::from_fn(&[6], |_| rng.gen_range(0.1..2.0));

        let build = |which: u8| -> Grid<f64> {
            let mut t = Tape::new();
            let p = t.leaf("p", pv.clone()).unwrap();
            let sq = t.square(p);
            let l1 = t.reduce_mean(sq).unwrap();
            let lg = t.log(p).unwrap();
            let l2 = t.reduce_sum(lg).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            let grads = t.backward(loss).unwrap();
            grads.named("p").unwrap().clone()
        };

        let ga = build(0);
        let gb = build(1);
        let gsum = build(2);
        for i in 0..6 {
            let expect = ga.data()[i] + gb.data()[i];
            assert_eq!(gsum.data()[i], expect);
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let input = Grid::from_fn(&[3, 8, 8], |_| rng.gen_range(-1.0f64..1.0));
        let weights = Grid::from_fn(&[4, 3, 3, 3], |_| rng.gen_range(-0.5..0.5));
        let bias = Grid::from_fn(&[4], |_| rng.gen_range(-0.1..0.1));
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(input.clone());
            let w = t.constant(weights.clone());
            let b = t.constant(bias.clone());
            let c = t.conv2d(x, w, b, 1, 1).unwrap();
            let s = t.softmax_channel(c).unwrap();
            let m = t.reduce_mean(s).unwrap();
            (t.value(c).clone(), t.scalar(m).unwrap())
        };
        let (c1, m1) = run();
        let (c2, m2) = run();
        assert_eq!(m1.to_bits(), m2.to_bits());
        assert!(c1
            .data()
            .iter()
            .zip(c2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn primitive_gradients_pass_randomized_finite_difference_trials() {
        // 100 randomized trials across the primitive set, 64-bit mode.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let seed = rng.gen::<u64>();
            let mut local = ChaCha8Rng::seed_from_u64(seed);
            let c_in = local.gen_range(1..3usize);
            let h = 4usize;
            let w = 4usize;
            let input = Grid::from_fn(&[c_in, h, w], |_| local.gen_range(0.2..1.5f64));
            let c_out = local.gen_range(1..3usize);
            let weights =
                Grid::from_fn(&[c_out, c_in, 3, 3], |_| local.gen_range(-0.6..0.6f64));
            let bias = Grid::from_fn(&[c_out], |_| local.gen_range(-0.2..0.2f64));
            let other = Grid::from_fn(&[c_in, h, w], |_| local.gen_range(0.3..1.2f64));
            let field = Grid::from_fn(&[2, h, w], |_| {
                // Keep sample points off the bilinear kernel's integer knots.
                let mag = local.gen_range(0.15..0.75f64);
                if local.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            });

            let params = vec![
                ("input".to_string(), input),
                ("weights".to_string(), weights),
                ("bias".to_string(), bias),
                ("other".to_string(), other),
                ("field".to_string(), field),
            ];
            let op_pick = trial % 10;
            let report = grad_check(&params, 1e-5, 6, seed, |t, ids| {
                let (x, wt, b, o, f) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
                let y = match op_pick {
                    0 => t.conv2d(x, wt, b, 1, 1)?,
                    1 => {
                        let pooled = t.avg_pool2(x)?;
                        t.leaky_relu(pooled, 0.2)
                    }
                    2 => t.sigmoid(x),
                    3 => t.log(x)?,
                    4 => {
                        let s = t.square(x);
                        t.mul(s, o)?
                    }
                    5 => t.div(x, o)?,
                    6 => {
                        let cat = t.concat_channels(&[x, o])?;
                        t.softmax_channel(cat)?
                    }
                    7 => t.resize_nearest_double(x)?,
                    8 => t.warp_image(x, f)?,
                    9 => {
                        let sm = t.smoothness(f)?;
                        let a = t.affine(sm, 3.0, 0.1);
                        let multi = t.concat_channels(&[x, o])?;
                        let rn = t.renorm_channels(multi)?;
                        let rsq = t.square(rn);
                        let rm = t.reduce_mean(rsq)?;
                        let cs = t.channel_sum(o)?;
                        let csq = t.square(cs);
                        let cm = t.reduce_mean(csq)?;
                        let ab = t.add(a, rm)?;
                        t.add(ab, cm)?
                    }
                    _ => unreachable!(),
                };
                if t.value(y).len() == 1 {
                    Ok(y)
                } else {
                    let sq = t.square(y);
                    t.reduce_mean(sq)
                }
            })
            .unwrap();
            worst = worst.max(report.max_rel_err);
            assert!(
                report.max_rel_err < 1e-4,
                "trial {trial} op {op_pick}: {}",
                report.max_rel_err
            );
        }
        // Keep visibility into how tight the bound is in CI logs.
        eprintln!("worst primitive-op rel err over 100 trials: {worst:.3e}");
    }

    #[test]
    fn duplicate_leaf_name_rejected() {
        let mut t = Tape::new();
        t.leaf("p", g1(&[1.0])).unwrap();
        assert!(t.leaf("p", g1(&[2.0])).is_err());
    }
}
