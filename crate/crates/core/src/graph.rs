//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator application as a node holding its
//! forward value. Nodes are appended in evaluation order, so the tape order is
//! a topological order and [`Graph::backward`] walks it in reverse, visiting
//! each reachable node once.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu6,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Operator kinds recorded on the tape, with whatever the backward pass needs.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    PoolAvg {
        x: Var,
    },
    PoolMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Activation {
        x: Var,
        f: Activation,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
        broadcast: bool,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    MeanSquaredError {
        pred: Var,
        target: Var,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. }
            | Op::Depthwise { x, w, b, .. }
            | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::PoolAvg { x }
            | Op::PoolMax { x, .. }
            | Op::Activation { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![*x],
            Op::Binary { a, b, .. } | Op::Concat { a, b } => vec![*a, *b],
            Op::FullyConnected { x, w, b } => vec![*x, *w, *b],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::MeanSquaredError { pred, target } => vec![*pred, *target],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::ConvTranspose { .. } => "conv2d_transpose",
            Op::PoolAvg { .. } => "pool_avg",
            Op::PoolMax { .. } => "pool_max",
            Op::Activation { .. } => "activation",
            Op::Binary { .. } => "binary",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::FullyConnected { .. } => "fully_connected",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::MeanSquaredError { .. } => "mse",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
    flops: u64,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

type Res<T> = Result<T, TensorError>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn check(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Res<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(TensorError::Mismatch {
            op,
            dim,
            expected,
            actual,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, flops: u64) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
            flops,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, param: Option<ParamId>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.detached(),
            op: Op::Leaf,
            param,
            needs_grad,
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked and reported in [`Gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, None, true)
    }

    /// A leaf that never receives a gradient (frames, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, None, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same
    /// parameter return the same node, so shared weights are one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.leaf(store.tensor(id).detached(), Some(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every node handle in tape order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of the floating-point operation counts of all recorded nodes.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    /// Peak bytes of simultaneously live non-parameter tensors when the tape
    /// is executed in order and every tensor is freed after its last consumer.
    pub fn peak_activation_bytes(&self, bytes_per_scalar: usize) -> usize {
        let n = self.nodes.len();
        let mut last_use: Vec<usize> = (0..n).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for v in node.op.inputs() {
                last_use[v.0] = last_use[v.0].max(i);
            }
        }
        // free_at[t]: bytes released once step t has finished
        let mut free_at = vec![0usize; n];
        let mut live = 0usize;
        let mut peak = 0usize;
        for i in 0..n {
            let node = &self.nodes[i];
            if node.param.is_some() {
                continue;
            }
            let bytes = node.value.numel() * bytes_per_scalar;
            live += bytes;
            peak = peak.max(live);
            free_at[last_use[i]] += bytes;
            live -= free_at[i];
            free_at[i] = 0;
        }
        peak
    }

    /// Hash of every piecewise choice made in the forward pass: the clamp
    /// region of each relu6 input and the argmax of each max pool. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    x,
                    f: Activation::Relu6,
                } => {
                    for &v in self.value(*x).data() {
                        let region: u8 = if v <= 0.0 {
                            0
                        } else if v < 6.0 {
                            1
                        } else {
                            2
                        };
                        region.hash(&mut h);
                    }
                }
                Op::PoolMax { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ---- operators -------------------------------------------------------

    fn conv_common(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Res<(Shape, Shape, ConvGeom)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                reason: "stride must be at least 1".into(),
            });
        }
        check(op, "kernel width", ws.height, ws.width)?;
        if let Some(b) = b {
            let bs = self.shape(b);
            let want = if op == "conv2d_transpose" {
                ws.channels
            } else {
                ws.batch
            };
            check(op, "bias length", want, bs.numel())?;
        }
        Ok((
            xs,
            ws,
            ConvGeom {
                kernel: ws.height,
                stride,
                pad,
            },
        ))
    }

    fn conv_out(op: &'static str, xs: Shape, channels: usize, geom: ConvGeom) -> Res<Shape> {
        let oh = kernels::conv_out_dim(xs.height, geom).ok_or(TensorError::NonPositiveOutput {
            op,
            dim: "height",
            value: xs.height as i64 + 2 * geom.pad as i64 - geom.kernel as i64,
        })?;
        let ow = kernels::conv_out_dim(xs.width, geom).ok_or(TensorError::NonPositiveOutput {
            op,
            dim: "width",
            value: xs.width as i64 + 2 * geom.pad as i64 - geom.kernel as i64,
        })?;
        Ok(Shape::new(xs.batch, channels, oh, ow))
    }

    /// Standard convolution; `w` is `[c_out, c_in, k, k]`, `b` has `c_out` values.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Res<Var> {
        let (xs, ws, geom) = self.conv_common("conv2d", x, w, b, stride, pad)?;
        check("conv2d", "input channels", ws.channels, xs.channels)?;
        let os = Self::conv_out("conv2d", xs, ws.batch, geom)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            ws.batch,
            b.map(|b| self.value(b).data()),
            geom,
            os,
        );
        let k2 = (geom.kernel * geom.kernel) as u64;
        let flops = 2 * k2 * ws.channels as u64 * os.numel() as u64
            + if b.is_some() { os.numel() as u64 } else { 0 };
        Ok(self.push(Tensor::new(os, out)?, Op::Conv2d { x, w, b, geom }, flops))
    }

    /// Per-channel convolution; `w` is `[c, 1, k, k]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Res<Var> {
        let (xs, ws, geom) = self.conv_common("depthwise_conv2d", x, w, b, stride, pad)?;
        check("depthwise_conv2d", "channels", ws.batch, xs.channels)?;
        check("depthwise_conv2d", "weight in-channels", 1, ws.channels)?;
        let os = Self::conv_out("depthwise_conv2d", xs, xs.channels, geom)?;
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
            os,
        );
        let k2 = (geom.kernel * geom.kernel) as u64;
        let flops = 2 * k2 * os.numel() as u64 + if b.is_some() { os.numel() as u64 } else { 0 };
        Ok(self.push(
            Tensor::new(os, out)?,
            Op::Depthwise { x, w, b, geom },
            flops,
        ))
    }

    /// Transposed convolution; `w` is `[c_in, c_out, k, k]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Res<Var> {
        let op = "conv2d_transpose";
        let (xs, ws, geom) = self.conv_common(op, x, w, b, stride, pad)?;
        check(op, "input channels", ws.batch, xs.channels)?;
        let oh = kernels::conv_transpose_out_dim(xs.height, geom);
        let ow = kernels::conv_transpose_out_dim(xs.width, geom);
        if oh <= 0 {
            return Err(TensorError::NonPositiveOutput {
                op,
                dim: "height",
                value: oh,
            });
        }
        if ow <= 0 {
            return Err(TensorError::NonPositiveOutput {
                op,
                dim: "width",
                value: ow,
            });
        }
        let os = Shape::new(xs.batch, ws.channels, oh as usize, ow as usize);
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
            os,
        );
        let k2 = (geom.kernel * geom.kernel) as u64;
        let flops = 2 * k2 * (ws.batch * ws.channels) as u64 * (xs.batch * xs.plane()) as u64
            + if b.is_some() { os.numel() as u64 } else { 0 };
        Ok(self.push(
            Tensor::new(os, out)?,
            Op::ConvTranspose { x, w, b, geom },
            flops,
        ))
    }

    /// Global average or max pooling to `[b, c, 1, 1]`.
    pub fn pool_global(&mut self, x: Var, mode: PoolMode) -> Res<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        if plane == 0 {
            return Err(TensorError::EmptySpatial {
                op: match mode {
                    PoolMode::Avg => "pool_avg",
                    PoolMode::Max => "pool_max",
                },
            });
        }
        let os = Shape::new(xs.batch, xs.channels, 1, 1);
        let xd = self.value(x).data();
        let flops = xs.numel() as u64;
        match mode {
            PoolMode::Avg => {
                let out = xd
                    .chunks_exact(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect();
                Ok(self.push(Tensor::new(os, out)?, Op::PoolAvg { x }, flops))
            }
            PoolMode::Max => {
                let mut out = Vec::with_capacity(os.numel());
                let mut argmax = Vec::with_capacity(os.numel());
                for (ci, p) in xd.chunks_exact(plane).enumerate() {
                    let mut best = 0;
                    for (i, &v) in p.iter().enumerate() {
                        // strict `>` keeps the first maximum in row-major order
                        if v > p[best] {
                            best = i;
                        }
                    }
                    out.push(p[best]);
                    argmax.push(ci * plane + best);
                }
                Ok(self.push(Tensor::new(os, out)?, Op::PoolMax { x, argmax }, flops))
            }
        }
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Res<Var> {
        let t = self.value(x);
        let data = match f {
            Activation::Relu6 => t.data().iter().map(|&v| v.clamp(0.0, 6.0)).collect(),
            Activation::Sigmoid => t.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let flops = t.numel() as u64;
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(value, Op::Activation { x, f }, flops))
    }

    pub fn relu6(&mut self, x: Var) -> Res<Var> {
        self.activation(x, Activation::Relu6)
    }

    pub fn sigmoid(&mut self, x: Var) -> Res<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Element-wise `a op b`. `b` may be `[b, c, 1, 1]`, replicated over space.
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Res<Var> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        let broadcast = if as_ == bs {
            false
        } else if bs.height == 1 && bs.width == 1 {
            check("binary", "batch", as_.batch, bs.batch)?;
            check("binary", "channels", as_.channels, bs.channels)?;
            true
        } else {
            check("binary", "batch", as_.batch, bs.batch)?;
            check("binary", "channels", as_.channels, bs.channels)?;
            check("binary", "height", as_.height, bs.height)?;
            check("binary", "width", as_.width, bs.width)?;
            unreachable!()
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let plane = as_.plane();
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out: Vec<f64> = if broadcast {
            ad.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i / plane]))
                .collect()
        } else {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        };
        let flops = out.len() as u64;
        Ok(self.push(
            Tensor::new(as_, out)?,
            Op::Binary {
                a,
                b,
                op,
                broadcast,
            },
            flops,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// Channel concatenation; `a` occupies channels `[0, c_a)`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Res<Var> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        check("concat_channels", "batch", as_.batch, bs.batch)?;
        check("concat_channels", "height", as_.height, bs.height)?;
        check("concat_channels", "width", as_.width, bs.width)?;
        let plane = as_.plane();
        let os = Shape::new(as_.batch, as_.channels + bs.channels, as_.height, as_.width);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..as_.batch {
            out.extend_from_slice(&ad[n * as_.channels * plane..(n + 1) * as_.channels * plane]);
            out.extend_from_slice(&bd[n * bs.channels * plane..(n + 1) * bs.channels * plane]);
        }
        Ok(self.push(Tensor::new(os, out)?, Op::Concat { a, b }, 0))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Res<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        Ok(self.push(value, Op::Slice { x, start }, 0))
    }

    /// Affine map on `[b, c, 1, 1]` inputs; `w` is `[out, c, 1, 1]`, `b` has `out` values.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Res<Var> {
        let xs = self.shape(x);
        if xs.height != 1 || xs.width != 1 {
            return Err(TensorError::InvalidArgument {
                op: "fully_connected",
                reason: format!("input must be spatially 1x1, got {xs}"),
            });
        }
        let ws = self.shape(w);
        check(
            "fully_connected",
            "input features",
            ws.channels,
            xs.channels,
        )?;
        check(
            "fully_connected",
            "bias length",
            ws.batch,
            self.shape(b).numel(),
        )?;
        let out = kernels::fc_forward(
            self.value(x).data(),
            xs.batch,
            xs.channels,
            self.value(w).data(),
            self.value(b).data(),
        );
        let flops = xs.batch as u64 * (2 * ws.channels as u64 * ws.batch as u64 + ws.batch as u64);
        let os = Shape::new(xs.batch, ws.batch, 1, 1);
        Ok(self.push(Tensor::new(os, out)?, Op::FullyConnected { x, w, b }, flops))
    }

    /// `x * scale[c] + shift[c]` per channel.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Res<Var> {
        let xs = self.shape(x);
        check(
            "channel_affine",
            "scale length",
            xs.channels,
            self.shape(scale).numel(),
        )?;
        check(
            "channel_affine",
            "shift length",
            xs.channels,
            self.shape(shift).numel(),
        )?;
        let plane = xs.plane();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % xs.channels;
                v * sc[c] + sh[c]
            })
            .collect();
        let flops = 2 * xs.numel() as u64;
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::ChannelAffine { x, scale, shift },
            flops,
        ))
    }

    /// Mean over all elements of `(pred - target)^2`, as a scalar node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Res<Var> {
        let ps = self.shape(pred);
        let ts = self.shape(target);
        if ps != ts {
            check("mse", "batch", ps.batch, ts.batch)?;
            check("mse", "channels", ps.channels, ts.channels)?;
            check("mse", "height", ps.height, ts.height)?;
            check("mse", "width", ps.width, ts.width)?;
        }
        let n = ps.numel();
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(s / n as f64),
            Op::MeanSquaredError { pred, target },
            3 * n as u64,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Res<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum();
        let flops = t.numel() as u64;
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, flops))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Res<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect())?;
        let flops = t.numel() as u64;
        Ok(self.push(value, Op::Scale { x, factor }, flops))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates `d loss / d node` from the scalar `loss` back through the
    /// tape and adds the gradients of parameter leaves into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Res<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(loss.0));
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(TensorError::NotScalar(ls));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for v in node.op.inputs() {
                if v.0 >= i {
                    return Err(TensorError::GraphOrder {
                        node: i,
                        input: v.0,
                    });
                }
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads[i].as_ref()) {
                store.tensor_mut(pid).accumulate_grad(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut gx = self.grad_slot(grads, *x).map(std::mem::take);
                let mut gw = self.grad_slot(grads, *w).map(std::mem::take);
                let mut gb = b.and_then(|b| self.grad_slot(grads, b).map(std::mem::take));
                kernels::conv2d_backward(
                    g,
                    xd,
                    xs,
                    wd,
                    out_shape,
                    *geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                if let Some(b) = b {
                    self.restore(grads, *b, gb);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let xs = self.shape(*x);
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut gx = self.grad_slot(grads, *x).map(std::mem::take);
                let mut gw = self.grad_slot(grads, *w).map(std::mem::take);
                let mut gb = b.and_then(|b| self.grad_slot(grads, b).map(std::mem::take));
                kernels::depthwise_backward(
                    g,
                    xd,
                    xs,
                    wd,
                    out_shape,
                    *geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                if let Some(b) = b {
                    self.restore(grads, *b, gb);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let xs = self.shape(*x);
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut gx = self.grad_slot(grads, *x).map(std::mem::take);
                let mut gw = self.grad_slot(grads, *w).map(std::mem::take);
                let mut gb = b.and_then(|b| self.grad_slot(grads, b).map(std::mem::take));
                kernels::conv_transpose_backward(
                    g,
                    xd,
                    xs,
                    wd,
                    out_shape,
                    *geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                if let Some(b) = b {
                    self.restore(grads, *b, gb);
                }
            }
            Op::PoolAvg { x } => {
                let plane = self.shape(*x).plane();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (j, v) in gx.iter_mut().enumerate() {
                        *v += g[j / plane] / plane as f64;
                    }
                }
            }
            Op::PoolMax { x, argmax } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, &j) in argmax.iter().enumerate() {
                        gx[j] += g[o];
                    }
                }
            }
            Op::Activation { x, f } => {
                let y = node.value.data();
                let xd = self.value(*x).data();
                let f = *f;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    match f {
                        Activation::Relu6 => {
                            for j in 0..gx.len() {
                                if xd[j] > 0.0 && xd[j] < 6.0 {
                                    gx[j] += g[j];
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for j in 0..gx.len() {
                                gx[j] += g[j] * y[j] * (1.0 - y[j]);
                            }
                        }
                    }
                }
            }
            Op::Binary {
                a,
                b,
                op,
                broadcast,
            } => {
                let plane = out_shape.plane();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let bi = |j: usize| if *broadcast { j / plane } else { j };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                        }
                        BinaryOp::Mul => {
                            for j in 0..ga.len() {
                                ga[j] += g[j] * bd[bi(j)];
                            }
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for j in 0..g.len() {
                        let d = match op {
                            BinaryOp::Add => g[j],
                            BinaryOp::Sub => -g[j],
                            BinaryOp::Mul => g[j] * ad[j],
                        };
                        gb[bi(j)] += d;
                    }
                }
            }
            Op::Concat { a, b } => {
                let as_ = self.shape(*a);
                let bs = self.shape(*b);
                let plane = as_.plane();
                let (ca, cb) = (as_.channels * plane, bs.channels * plane);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for n in 0..as_.batch {
                        let src = &g[n * (ca + cb)..n * (ca + cb) + ca];
                        ga[n * ca..(n + 1) * ca]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, d)| *x += d);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for n in 0..as_.batch {
                        let src = &g[n * (ca + cb) + ca..(n + 1) * (ca + cb)];
                        gb[n * cb..(n + 1) * cb]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let len = out_shape.channels * plane;
                let start = *start;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for n in 0..xs.batch {
                        let dst = (n * xs.channels + start) * plane;
                        gx[dst..dst + len]
                            .iter_mut()
                            .zip(&g[n * len..(n + 1) * len])
                            .for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::FullyConnected { x, w, b } => {
                let xs = self.shape(*x);
                let in_f = xs.channels;
                let out_f = out_shape.channels;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for n in 0..xs.batch {
                        for o in 0..out_f {
                            let go = g[n * out_f + o];
                            for c in 0..in_f {
                                gx[n * in_f + c] += go * wd[o * in_f + c];
                            }
                        }
                    }
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    for n in 0..xs.batch {
                        for o in 0..out_f {
                            let go = g[n * out_f + o];
                            for c in 0..in_f {
                                gw[o * in_f + c] += go * xd[n * in_f + c];
                            }
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for n in 0..xs.batch {
                        for o in 0..out_f {
                            gb[o] += g[n * out_f + o];
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let ch = |j: usize| (j / plane) % xs.channels;
                let xd = self.value(*x).data();
                let sc = self.value(*scale).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * sc[ch(j)];
                    }
                }
                if let Some(gs) = self.grad_slot(grads, *scale) {
                    for j in 0..g.len() {
                        gs[ch(j)] += g[j] * xd[j];
                    }
                }
                if let Some(gh) = self.grad_slot(grads, *shift) {
                    for j in 0..g.len() {
                        gh[ch(j)] += g[j];
                    }
                }
            }
            Op::MeanSquaredError { pred, target } => {
                let pd = self.value(*pred).data();
                let td = self.value(*target).data();
                let k = 2.0 * g[0] / pd.len() as f64;
                if let Some(gp) = self.grad_slot(grads, *pred) {
                    for j in 0..gp.len() {
                        gp[j] += k * (pd[j] - td[j]);
                    }
                }
                if let Some(gt) = self.grad_slot(grads, *target) {
                    for j in 0..gt.len() {
                        gt[j] -= k * (pd[j] - td[j]);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(v, d)| *v += f * d);
                }
            }
        }
    }

    fn restore(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
        if let Some(g) = g {
            grads[v.0] = Some(g);
        }
    }
}
