//! Inverted-residual building blocks with optional channel attention.
//!
//! All three block kinds share the expand → depthwise → project branch. They
//! differ only in how the projected branch is gated before the skip:
//!
//! * `Mb`: no gate.
//! * `MbSe`: `sigmoid(mlp(avg(F)))`.
//! * `CaRes`: `sigmoid(mlp(avg(F)) + mlp(max(F)))` with one MLP shared by both
//!   pooled inputs.
//!
//! The skip connection exists only when the block keeps both stride and
//! channel count; downsampling or widening blocks return the gated branch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, PoolMode, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EXPANSION: usize = 6;
pub const DEFAULT_MLP_REDUCTION: usize = 4;
const DW_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Mb,
    MbSe,
    CaRes,
}

impl BlockKind {
    pub fn has_attention(self) -> bool {
        !matches!(self, BlockKind::Mb)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Mb => "mb",
            BlockKind::MbSe => "mb_se",
            BlockKind::CaRes => "ca_res",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "mb" => Ok(BlockKind::Mb),
            "mb_se" | "mbse" | "se" => Ok(BlockKind::MbSe),
            "ca_res" | "cares" => Ok(BlockKind::CaRes),
            other => Err(Error::BlockSpec(format!("unknown block kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion: usize,
    pub mlp_reduction: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            stride,
            expansion: DEFAULT_EXPANSION,
            mlp_reduction: DEFAULT_MLP_REDUCTION,
        }
    }

    pub fn with_expansion(mut self, expansion: usize) -> Self {
        self.expansion = expansion;
        self
    }

    pub fn with_mlp_reduction(mut self, r: usize) -> Self {
        self.mlp_reduction = r;
        self
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn mlp_hidden(&self) -> usize {
        self.out_channels / self.mlp_reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::BlockSpec("channel counts must be positive".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::BlockSpec(format!(
                "stride {} not in {{1, 2}}",
                self.stride
            )));
        }
        if self.expansion == 0 {
            return Err(Error::BlockSpec("expansion must be at least 1".into()));
        }
        if self.kind.has_attention() {
            let r = self.mlp_reduction;
            if r == 0 || r > self.out_channels {
                return Err(Error::BlockSpec(format!(
                    "mlp_reduction {r} exceeds {} attended channels",
                    self.out_channels
                )));
            }
            if !self.out_channels.is_multiple_of(r) {
                return Err(Error::BlockSpec(format!(
                    "mlp_reduction {r} does not divide {} attended channels",
                    self.out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        // 3x3 depthwise with pad 1
        (
            (height - 1) / self.stride + 1,
            (width - 1) / self.stride + 1,
        )
    }

    /// Closed-form number of scalars held by the block.
    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.in_channels, self.hidden_channels(), self.out_channels);
        let expand = if self.expansion > 1 { i * h + 2 * h } else { 0 };
        let dw = DW_KERNEL * DW_KERNEL * h + 2 * h;
        let project = h * o + 2 * o;
        let attention = if self.kind.has_attention() {
            let m = self.mlp_hidden();
            o * m + m + m * o + o
        } else {
            0
        };
        expand + dw + project + attention
    }

    /// Closed-form FLOPs of one forward pass over a batch of one at `height x width`.
    pub fn flops(&self, height: usize, width: usize) -> u64 {
        let (i, h, o) = (
            self.in_channels as u64,
            self.hidden_channels() as u64,
            self.out_channels as u64,
        );
        let in_px = (height * width) as u64;
        let (oh, ow) = self.output_dims(height, width);
        let px = (oh * ow) as u64;
        let k2 = (DW_KERNEL * DW_KERNEL) as u64;
        let conv_affine_relu = |macs: u64, ch: u64, px: u64| 2 * macs + 3 * ch * px;

        let mut total = 0;
        if self.expansion > 1 {
            total += conv_affine_relu(i * h * in_px, h, in_px);
        }
        total += conv_affine_relu(k2 * h * px, h, px);
        // projection is linear: conv + affine only
        total += 2 * h * o * px + 2 * o * px;

        if self.kind.has_attention() {
            let m = self.mlp_hidden() as u64;
            let mlp = (2 * o * m + m) + m + (2 * m * o + o);
            total += match self.kind {
                // avg + max pooling, two MLP passes, their sum, sigmoid
                BlockKind::CaRes => 2 * o * px + 2 * mlp + o + o,
                BlockKind::MbSe => o * px + mlp + o,
                BlockKind::Mb => unreachable!(),
            };
            total += o * px; // gating multiply
        }
        if self.has_skip() {
            total += o * px;
        }
        total
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    w: ParamId,
    scale: ParamId,
    shift: ParamId,
}

impl ConvBn {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        w_shape: Shape,
        fan_in: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            w: store.add_he_normal(format!("{name}.w"), w_shape, fan_in, rng),
            scale: store.add(
                format!("{name}.scale"),
                Tensor::ones(Shape::vector(channels)),
            ),
            shift: store.add(
                format!("{name}.shift"),
                Tensor::zeros(Shape::vector(channels)),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl Mlp {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, m: usize, rng: &mut R) -> Self {
        Mlp {
            fc1_w: store.add_he_normal(format!("{name}.fc1.w"), Shape::new(m, c, 1, 1), c, rng),
            fc1_b: store.add(format!("{name}.fc1.b"), Tensor::zeros(Shape::vector(m))),
            fc2_w: store.add_he_normal(format!("{name}.fc2.w"), Shape::new(c, m, 1, 1), m, rng),
            fc2_b: store.add(format!("{name}.fc2.b"), Tensor::zeros(Shape::vector(c))),
        }
    }

    /// FC(c → c/r) → relu6 → FC(c/r → c).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.fc1_w), g.param(store, self.fc1_b));
        let h = g.fully_connected(x, w1, b1)?;
        let h = g.relu6(h)?;
        let (w2, b2) = (g.param(store, self.fc2_w), g.param(store, self.fc2_b));
        Ok(g.fully_connected(h, w2, b2)?)
    }
}

/// Parameter handles of one block, registered under a name prefix.
#[derive(Clone, Debug)]
pub struct Block {
    pub spec: BlockSpec,
    pub prefix: String,
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    pub attention: Option<Mlp>,
}

impl Block {
    pub fn new<R: Rng>(
        spec: BlockSpec,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (i, h, o) = (spec.in_channels, spec.hidden_channels(), spec.out_channels);
        let expand = (spec.expansion > 1).then(|| {
            ConvBn::new(
                store,
                &format!("{prefix}.expand"),
                Shape::new(h, i, 1, 1),
                i,
                h,
                rng,
            )
        });
        let depthwise = ConvBn::new(
            store,
            &format!("{prefix}.dw"),
            Shape::new(h, 1, DW_KERNEL, DW_KERNEL),
            DW_KERNEL * DW_KERNEL,
            h,
            rng,
        );
        let project = ConvBn::new(
            store,
            &format!("{prefix}.project"),
            Shape::new(o, h, 1, 1),
            h,
            o,
            rng,
        );
        let attention = spec
            .kind
            .has_attention()
            .then(|| Mlp::new(store, &format!("{prefix}.att"), o, spec.mlp_hidden(), rng));
        Ok(Block {
            spec,
            prefix: prefix.to_string(),
            expand,
            depthwise,
            project,
            attention,
        })
    }

    pub fn project_weight(&self) -> ParamId {
        self.project.w
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in self.expand.iter().chain([&self.depthwise, &self.project]) {
            ids.extend([c.w, c.scale, c.shift]);
        }
        if let Some(m) = &self.attention {
            ids.extend([m.fc1_w, m.fc1_b, m.fc2_w, m.fc2_b]);
        }
        ids
    }

    /// The expand → depthwise → project branch, without the skip.
    pub fn inverted_residual(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let got = g.shape(x).channels;
        if got != self.spec.in_channels {
            return Err(Error::Tensor(crate::TensorError::Mismatch {
                op: "inverted_residual",
                dim: "input channels",
                expected: self.spec.in_channels,
                actual: got,
            }));
        }
        let mut h = x;
        if let Some(e) = &self.expand {
            let w = g.param(store, e.w);
            h = g.conv2d(h, w, None, 1, 0)?;
            h = affine(g, store, e, h)?;
            h = g.relu6(h)?;
        }
        let w = g.param(store, self.depthwise.w);
        h = g.depthwise_conv2d(h, w, None, self.spec.stride, DW_KERNEL / 2)?;
        h = affine(g, store, &self.depthwise, h)?;
        h = g.relu6(h)?;
        let w = g.param(store, self.project.w);
        h = g.conv2d(h, w, None, 1, 0)?;
        affine(g, store, &self.project, h)
    }

    /// Attention vector `[b, c, 1, 1]` for feature map `feat`.
    pub fn attention_vector(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
    ) -> Result<Option<Var>> {
        let Some(mlp) = &self.attention else {
            return Ok(None);
        };
        let v = match self.spec.kind {
            BlockKind::CaRes => channel_attention(g, store, mlp, feat)?,
            BlockKind::MbSe => se_attention(g, store, mlp, feat)?,
            BlockKind::Mb => unreachable!(),
        };
        Ok(Some(v))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let branch = self.inverted_residual(g, store, x)?;
        let branch = match self.attention_vector(g, store, branch)? {
            Some(att) => g.mul(branch, att)?,
            None => branch,
        };
        if self.spec.has_skip() {
            Ok(g.add(x, branch)?)
        } else {
            Ok(branch)
        }
    }
}

fn affine(g: &mut Graph, store: &ParamStore, c: &ConvBn, x: Var) -> Result<Var> {
    let (s, t) = (g.param(store, c.scale), g.param(store, c.shift));
    Ok(g.channel_affine(x, s, t)?)
}

/// `sigmoid(mlp(avg(feat)) + mlp(max(feat)))`.
pub fn channel_attention(g: &mut Graph, store: &ParamStore, mlp: &Mlp, feat: Var) -> Result<Var> {
    let avg = g.pool_global(feat, PoolMode::Avg)?;
    let max = g.pool_global(feat, PoolMode::Max)?;
    let a = mlp.forward(g, store, avg)?;
    let m = mlp.forward(g, store, max)?;
    let s = g.add(a, m)?;
    Ok(g.sigmoid(s)?)
}

/// `sigmoid(mlp(avg(feat)))`, the squeeze-and-excitation gate.
pub fn se_attention(g: &mut Graph, store: &ParamStore, mlp: &Mlp, feat: Var) -> Result<Var> {
    let avg = g.pool_global(feat, PoolMode::Avg)?;
    let a = mlp.forward(g, store, avg)?;
    Ok(g.sigmoid(a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn build(spec: BlockSpec, seed: u64) -> (Block, ParamStore) {
        let mut store = ParamStore::new();
        let block = Block::new(spec, "b", &mut store, &mut seeded(seed)).unwrap();
        (block, store)
    }

    fn random_input(shape: Shape, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn zero_projection(block: &Block, store: &mut ParamStore) {
        store
            .tensor_mut(block.project_weight())
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    #[test]
    fn skip_policy() {
        assert!(BlockSpec::new(BlockKind::CaRes, 16, 16, 1).has_skip());
        assert!(!BlockSpec::new(BlockKind::CaRes, 16, 16, 2).has_skip());
        assert!(!BlockSpec::new(BlockKind::CaRes, 16, 24, 1).has_skip());
    }

    #[test]
    fn spec_validation() {
        let bad = BlockSpec::new(BlockKind::CaRes, 16, 8, 1).with_mlp_reduction(16);
        assert!(Block::new(bad, "b", &mut ParamStore::new(), &mut seeded(0)).is_err());
        let bad = BlockSpec::new(BlockKind::CaRes, 16, 24, 1).with_mlp_reduction(5);
        assert!(bad.validate().is_err());
        let ok = BlockSpec::new(BlockKind::Mb, 16, 24, 1).with_mlp_reduction(5);
        assert!(ok.validate().is_ok());
        assert!(BlockSpec::new(BlockKind::Mb, 16, 24, 3).validate().is_err());
        assert!(BlockSpec::new(BlockKind::Mb, 16, 24, 1)
            .with_expansion(0)
            .validate()
            .is_err());
    }

    #[test]
    fn expansion_one_has_no_expand_layer() {
        let spec = BlockSpec::new(BlockKind::Mb, 16, 16, 1).with_expansion(1);
        let (block, store) = build(spec, 1);
        assert!(store.by_name("b.expand.w").is_none());
        assert_eq!(block.param_ids().len(), 6);
        let mut g = Graph::new();
        let x = g.constant(random_input(Shape::new(1, 16, 8, 8), 2));
        let y = block.inverted_residual(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 16, 8, 8));
    }

    #[test]
    fn zero_projection_gives_zero_branch() {
        for kind in [BlockKind::Mb, BlockKind::MbSe, BlockKind::CaRes] {
            let (block, mut store) = build(BlockSpec::new(kind, 8, 16, 2), 3);
            zero_projection(&block, &mut store);
            let mut g = Graph::new();
            let x = g.constant(random_input(Shape::new(2, 8, 8, 8), 4));
            let y = block.inverted_residual(&mut g, &store, x).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn downsampling_shape() {
        let (block, store) = build(BlockSpec::new(BlockKind::CaRes, 16, 24, 2), 5);
        let mut g = Graph::new();
        let x = g.constant(random_input(Shape::new(1, 16, 32, 32), 6));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 24, 16, 16));
        let bad = g.constant(random_input(Shape::new(1, 8, 32, 32), 6));
        assert!(block.forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn shape_preserving_block() {
        let (block, store) = build(BlockSpec::new(BlockKind::CaRes, 16, 16, 1), 7);
        let mut g = Graph::new();
        let x = g.constant(random_input(Shape::new(1, 16, 64, 64), 8));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 16, 64, 64));
    }

    #[test]
    fn zero_projection_identity() {
        for kind in [BlockKind::Mb, BlockKind::MbSe, BlockKind::CaRes] {
            let (block, mut store) = build(BlockSpec::new(kind, 16, 16, 1), 9);
            zero_projection(&block, &mut store);
            let input = random_input(Shape::new(2, 16, 8, 8), 10);
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let y = block.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.value(y).max_abs_diff(&input), 0.0);
        }
    }

    #[test]
    fn param_count_matches_enumeration() {
        for kind in [BlockKind::Mb, BlockKind::MbSe, BlockKind::CaRes] {
            for (i, o, s, e) in [
                (16, 16, 1, 1),
                (16, 24, 2, 6),
                (64, 32, 1, 6),
                (128, 32, 1, 6),
                (48, 64, 1, 3),
            ] {
                let spec = BlockSpec::new(kind, i, o, s).with_expansion(e);
                let (_, store) = build(spec, 11);
                assert_eq!(spec.param_count(), store.scalar_count(), "{spec:?}");
            }
        }
    }

    #[test]
    fn flops_match_runtime_enumeration() {
        for kind in [BlockKind::Mb, BlockKind::MbSe, BlockKind::CaRes] {
            for (i, o, s, e, hw) in [
                (16, 16, 1, 1, 8),
                (16, 24, 2, 6, 9),
                (32, 32, 1, 6, 8),
                (24, 32, 2, 6, 16),
            ] {
                let spec = BlockSpec::new(kind, i, o, s).with_expansion(e);
                let (block, store) = build(spec, 12);
                let mut g = Graph::new();
                let x = g.constant(Tensor::zeros(Shape::new(1, i, hw, hw)));
                block.forward(&mut g, &store, x).unwrap();
                assert_eq!(spec.flops(hw, hw), g.flops(), "{spec:?} at {hw}");
            }
        }
    }

    #[test]
    fn block_kind_parsing() {
        assert_eq!("ca_res".parse::<BlockKind>().unwrap(), BlockKind::CaRes);
        assert_eq!("MB+SE".parse::<BlockKind>().unwrap(), BlockKind::MbSe);
        assert_eq!("mb".parse::<BlockKind>().unwrap(), BlockKind::Mb);
        assert!("ghost".parse::<BlockKind>().is_err());
        for k in [BlockKind::Mb, BlockKind::MbSe, BlockKind::CaRes] {
            assert_eq!(k.to_string().parse::<BlockKind>().unwrap(), k);
        }
    }
}
