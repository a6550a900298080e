//! The two-branch student network and the fused spatiotemporal network.
//!
//! Both share one encoder layout: a stride-2 stem convolution and three
//! low-level blocks (`f^s`, applied to both frames with the same weights),
//! then a spatial path fed with `f^s(I_t)` and a temporal path fed with
//! `cat(f^s(I_t), f^s(I_t) - f^s(I_t+1))`. The student decodes each path with
//! its own deconvolution head; the spatiotemporal network concatenates the two
//! path outputs and decodes them through a fusion subnet.
//!
//! Encoder parameters live under the `enc.` prefix in both networks, which is
//! what weight transfer copies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::blocks::{Block, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const SUPPORTED_RESOLUTIONS: [usize; 5] = [32, 64, 96, 128, 256];
pub const FRAME_CHANNELS: usize = 3;
/// Per-channel mean subtracted from `[0, 1]` RGB frames.
pub const FRAME_MEAN: [f64; 3] = [0.5, 0.5, 0.5];

/// Plain convolution or transposed convolution layer geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    fn conv_out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn deconv_out(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    Student,
    Spatiotemporal,
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetKind::Student => "student",
            NetKind::Spatiotemporal => "spatiotemporal",
        })
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(NetKind::Student),
            "spatiotemporal" => Ok(NetKind::Spatiotemporal),
            other => Err(Error::Config(format!("unknown network kind `{other}`"))),
        }
    }
}

/// Full layer table of both networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_resolution: usize,
    pub block_kind: BlockKind,
    /// Followed by a per-channel affine and relu6.
    pub stem: ConvSpec,
    pub low_level: Vec<BlockSpec>,
    pub spatial_path: Vec<BlockSpec>,
    pub temporal_path: Vec<BlockSpec>,
    /// Transposed convolutions with bias; relu6 between, sigmoid after the last.
    pub deconv: [ConvSpec; 2],
    pub fusion: Vec<BlockSpec>,
    pub fusion_deconv: [ConvSpec; 2],
}

impl NetworkConfig {
    /// The reference layer table for `block_kind` at a square input resolution.
    pub fn reference(input_resolution: usize, block_kind: BlockKind) -> Self {
        let b = |i, o, s| BlockSpec::new(block_kind, i, o, s);
        let path = |first_in| {
            vec![
                b(first_in, 32, 1),
                b(32, 48, 1),
                b(48, 48, 1),
                b(48, 64, 1),
                b(64, 64, 1),
            ]
        };
        let deconv = [
            ConvSpec::new(64, 16, 4, 2, 1),
            ConvSpec::new(16, 1, 8, 4, 2),
        ];
        NetworkConfig {
            input_resolution,
            block_kind,
            stem: ConvSpec::new(FRAME_CHANNELS, 16, 3, 2, 1),
            low_level: vec![b(16, 16, 1).with_expansion(1), b(16, 24, 2), b(24, 32, 2)],
            spatial_path: path(32),
            temporal_path: path(64),
            deconv,
            fusion: vec![
                b(128, 32, 1).with_expansion(1),
                b(32, 32, 1),
                b(32, 32, 1),
                b(32, 48, 1),
                b(48, 64, 1),
            ],
            fusion_deconv: deconv,
        }
    }

    pub fn with_resolution(mut self, input_resolution: usize) -> Self {
        self.input_resolution = input_resolution;
        self
    }

    /// Product of all encoder strides.
    pub fn encoder_stride(&self) -> usize {
        self.stem.stride
            * self
                .low_level
                .iter()
                .chain(&self.spatial_path)
                .map(|s| s.stride)
                .product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !SUPPORTED_RESOLUTIONS.contains(&self.input_resolution) {
            return bad(format!(
                "resolution {} not one of {SUPPORTED_RESOLUTIONS:?}",
                self.input_resolution
            ));
        }
        self.validate_layers()
    }

    /// Structural checks that do not depend on the input resolution.
    fn validate_layers(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for s in self.blocks() {
            s.validate()?;
        }
        if self.stem.in_channels != FRAME_CHANNELS {
            return bad(format!(
                "stem takes {} channels, frames have 3",
                self.stem.in_channels
            ));
        }
        chain("low_level", self.stem.out_channels, &self.low_level)?;
        let low_out = self.low_out_channels();
        let path_out = chain("spatial_path", low_out, &self.spatial_path)?;
        let tem_out = chain("temporal_path", 2 * low_out, &self.temporal_path)?;
        if tem_out != path_out {
            return bad(format!(
                "temporal path ends with {tem_out} channels, spatial with {path_out}"
            ));
        }
        for (a, b) in self.spatial_path.iter().zip(&self.temporal_path) {
            if a.stride != b.stride {
                return bad("spatial and temporal path strides differ".into());
            }
        }
        if self.temporal_path.len() != self.spatial_path.len() {
            return bad("spatial and temporal paths differ in depth".into());
        }
        let fuse_out = chain("fusion", 2 * path_out, &self.fusion)?;
        if self.fusion.iter().any(|s| s.stride != 1) {
            return bad("fusion blocks must keep the path resolution".into());
        }
        deconv_chain("deconv", path_out, &self.deconv)?;
        deconv_chain("fusion_deconv", fuse_out, &self.fusion_deconv)?;
        let up: usize = self.deconv.iter().map(|d| d.stride).product();
        let up_fuse: usize = self.fusion_deconv.iter().map(|d| d.stride).product();
        if up != self.encoder_stride() || up_fuse != self.encoder_stride() {
            return bad(format!(
                "encoder stride {} not matched by deconvolution strides {up} / {up_fuse}",
                self.encoder_stride()
            ));
        }
        for d in self.deconv.iter().chain(&self.fusion_deconv) {
            // exact x stride upsampling
            if d.kernel != d.stride + 2 * d.pad {
                return bad(format!(
                    "deconv k={} s={} p={} does not scale exactly",
                    d.kernel, d.stride, d.pad
                ));
            }
        }
        Ok(())
    }

    pub fn low_out_channels(&self) -> usize {
        self.low_level
            .last()
            .map_or(self.stem.out_channels, |s| s.out_channels)
    }

    pub fn path_out_channels(&self) -> usize {
        self.spatial_path
            .last()
            .map_or(self.low_out_channels(), |s| s.out_channels)
    }

    fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.low_level
            .iter()
            .chain(&self.spatial_path)
            .chain(&self.temporal_path)
            .chain(&self.fusion)
    }

    /// `key = value` lines; only the two free choices are written, the layer
    /// table is the reference one.
    pub fn to_text(&self) -> String {
        format!(
            "resolution = {}\nblock_kind = {}\n",
            self.input_resolution, self.block_kind
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut resolution = None;
        let mut kind = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            match k.trim() {
                "resolution" => {
                    resolution =
                        Some(v.trim().parse::<usize>().map_err(|e| {
                            Error::Config(format!("line {}: resolution: {e}", n + 1))
                        })?)
                }
                "block_kind" => kind = Some(v.trim().parse::<BlockKind>()?),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        n + 1
                    )))
                }
            }
        }
        let cfg = NetworkConfig::reference(
            resolution.ok_or_else(|| Error::Config("missing key `resolution`".into()))?,
            kind.ok_or_else(|| Error::Config("missing key `block_kind`".into()))?,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

fn chain(name: &str, mut channels: usize, blocks: &[BlockSpec]) -> Result<usize> {
    for (i, s) in blocks.iter().enumerate() {
        if s.in_channels != channels {
            return Err(Error::Config(format!(
                "{name}[{i}] takes {} channels, previous layer gives {channels}",
                s.in_channels
            )));
        }
        channels = s.out_channels;
    }
    Ok(channels)
}

fn deconv_chain(name: &str, mut channels: usize, layers: &[ConvSpec]) -> Result<usize> {
    for (i, d) in layers.iter().enumerate() {
        if d.in_channels != channels {
            return Err(Error::Config(format!(
                "{name}[{i}] takes {} channels, previous layer gives {channels}",
                d.in_channels
            )));
        }
        channels = d.out_channels;
    }
    if channels != 1 {
        return Err(Error::Config(format!(
            "{name} must end with one channel, got {channels}"
        )));
    }
    Ok(channels)
}

// ---- closed-form counts ------------------------------------------------

fn stem_params(s: &ConvSpec) -> usize {
    s.in_channels * s.out_channels * s.kernel * s.kernel + 2 * s.out_channels
}

fn deconv_params(d: &[ConvSpec]) -> usize {
    d.iter()
        .map(|d| d.in_channels * d.out_channels * d.kernel * d.kernel + d.out_channels)
        .sum()
}

fn encoder_params(c: &NetworkConfig) -> usize {
    stem_params(&c.stem)
        + c.low_level
            .iter()
            .chain(&c.spatial_path)
            .chain(&c.temporal_path)
            .map(BlockSpec::param_count)
            .sum::<usize>()
}

/// Number of scalar parameters of the network `kind` built from `config`.
pub fn param_count(config: &NetworkConfig, kind: NetKind) -> usize {
    encoder_params(config)
        + match kind {
            NetKind::Student => 2 * deconv_params(&config.deconv),
            NetKind::Spatiotemporal => {
                config
                    .fusion
                    .iter()
                    .map(BlockSpec::param_count)
                    .sum::<usize>()
                    + deconv_params(&config.fusion_deconv)
            }
        }
}

/// FLOPs of a bias-free `k x k` depthwise conv plus a 1x1 pointwise conv,
/// over those of the dense `k x k` conv they replace, at stride 1 on an
/// `h x w` map.
pub fn separable_flop_ratio(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> f64 {
    let px = (h * w) as u64;
    let (c_in, c_out, k2) = (c_in as u64, c_out as u64, (k * k) as u64);
    let separable = 2 * k2 * c_in * px + 2 * c_in * c_out * px;
    let dense = 2 * k2 * c_in * c_out * px;
    separable as f64 / dense as f64
}

/// How depthwise convolutions are counted by [`flop_count_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthwiseCost {
    /// As built.
    Depthwise,
    /// As a dense convolution with the same input, output and kernel shape.
    Dense,
}

fn blocks_flops(blocks: &[BlockSpec], mut h: usize, cost: DepthwiseCost) -> (u64, usize) {
    let mut total = 0;
    for s in blocks {
        let (oh, _) = s.output_dims(h, h);
        total += s.flops(h, h);
        if cost == DepthwiseCost::Dense {
            let c = s.hidden_channels() as u64;
            total += 2 * 9 * c * (c - 1) * (oh * oh) as u64;
        }
        h = oh;
    }
    (total, h)
}

fn head_flops(d: &[ConvSpec; 2], h: usize) -> u64 {
    let mut total = 0;
    let mut h = h;
    for layer in d {
        let oh = layer.deconv_out(h);
        let k2 = (layer.kernel * layer.kernel) as u64;
        total += 2 * k2 * (layer.in_channels * layer.out_channels * h * h) as u64;
        // bias, then relu6 or sigmoid
        total += 2 * (layer.out_channels * oh * oh) as u64;
        h = oh;
    }
    total
}

/// Closed-form FLOPs of one forward pass on one frame pair at `resolution`.
/// Convolutions count two operations per multiply-add; affine, activation,
/// pooling, FC and element-wise operators count as recorded on the tape.
pub fn flop_count(config: &NetworkConfig, kind: NetKind, resolution: usize) -> u64 {
    flop_count_with(config, kind, resolution, DepthwiseCost::Depthwise)
}

pub fn flop_count_with(
    config: &NetworkConfig,
    kind: NetKind,
    resolution: usize,
    cost: DepthwiseCost,
) -> u64 {
    let s = &config.stem;
    let h = s.conv_out(resolution);
    let px = (h * h) as u64;
    let k2 = (s.kernel * s.kernel) as u64;
    let stem =
        2 * k2 * (s.in_channels * s.out_channels) as u64 * px + 3 * s.out_channels as u64 * px;
    let (low, h) = blocks_flops(&config.low_level, h, cost);
    let frame = stem + low;
    let diff = (config.low_out_channels() * h * h) as u64;
    let (spa, hp) = blocks_flops(&config.spatial_path, h, cost);
    let (tem, _) = blocks_flops(&config.temporal_path, h, cost);
    let encoder = 2 * frame + diff + spa + tem;
    encoder
        + match kind {
            NetKind::Student => 2 * head_flops(&config.deconv, hp),
            NetKind::Spatiotemporal => {
                let (fuse, hf) = blocks_flops(&config.fusion, hp, cost);
                fuse + head_flops(&config.fusion_deconv, hf)
            }
        }
}

// ---- runtime networks ----------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct Stem {
    w: ParamId,
    scale: ParamId,
    shift: ParamId,
    spec: ConvSpec,
}

#[derive(Clone, Copy, Debug)]
struct Deconv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

/// Two transposed convolutions restoring the input resolution, sigmoid output.
#[derive(Clone, Debug)]
pub struct Head {
    layers: [Deconv; 2],
}

impl Head {
    fn new<R: Rng>(
        specs: &[ConvSpec; 2],
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let mut make = |i: usize| {
            let d = specs[i];
            let k2 = d.kernel * d.kernel;
            Deconv {
                // fan-in of a transposed convolution: contributions per output pixel
                w: store.add_he_normal(
                    format!("{prefix}.deconv{i}.w"),
                    Shape::new(d.in_channels, d.out_channels, d.kernel, d.kernel),
                    d.in_channels * k2 / (d.stride * d.stride),
                    rng,
                ),
                b: store.add(
                    format!("{prefix}.deconv{i}.b"),
                    Tensor::zeros(Shape::vector(d.out_channels)),
                ),
                spec: d,
            }
        };
        let first = make(0);
        let second = make(1);
        Head {
            layers: [first, second],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, d) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(store, d.w), g.param(store, d.b));
            h = g.conv2d_transpose(h, w, Some(b), d.spec.stride, d.spec.pad)?;
            h = if i + 1 < self.layers.len() {
                g.relu6(h)?
            } else {
                g.sigmoid(h)?
            };
        }
        Ok(h)
    }

    /// Weight and bias of the last transposed convolution.
    pub fn last_layer(&self) -> (ParamId, ParamId) {
        let d = &self.layers[1];
        (d.w, d.b)
    }
}

/// Stem, low-level blocks and both paths.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Stem,
    pub low_level: Vec<Block>,
    pub spatial_path: Vec<Block>,
    pub temporal_path: Vec<Block>,
}

/// Path outputs of the encoder on one frame pair.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub low_t: Var,
    pub low_t1: Var,
    pub temporal_input: Var,
    pub spatial: Var,
    pub temporal: Var,
}

impl Encoder {
    fn new<R: Rng>(config: &NetworkConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let s = config.stem;
        let stem = Stem {
            w: store.add_he_normal(
                "enc.stem.w",
                Shape::new(s.out_channels, s.in_channels, s.kernel, s.kernel),
                s.in_channels * s.kernel * s.kernel,
                rng,
            ),
            scale: store.add(
                "enc.stem.scale",
                Tensor::ones(Shape::vector(s.out_channels)),
            ),
            shift: store.add(
                "enc.stem.shift",
                Tensor::zeros(Shape::vector(s.out_channels)),
            ),
            spec: s,
        };
        let mut build = |specs: &[BlockSpec], name: &str| -> Result<Vec<Block>> {
            specs
                .iter()
                .enumerate()
                .map(|(i, &spec)| Block::new(spec, &format!("enc.{name}{i}"), store, rng))
                .collect()
        };
        Ok(Encoder {
            stem,
            low_level: build(&config.low_level, "low")?,
            spatial_path: build(&config.spatial_path, "spa")?,
            temporal_path: build(&config.temporal_path, "tem")?,
        })
    }

    /// `f^s`: stem and low-level blocks on one normalized frame batch.
    pub fn low_level_forward(&self, g: &mut Graph, store: &ParamStore, frame: Var) -> Result<Var> {
        let s = &self.stem;
        let w = g.param(store, s.w);
        let mut h = g.conv2d(frame, w, None, s.spec.stride, s.spec.pad)?;
        let (sc, sh) = (g.param(store, s.scale), g.param(store, s.shift));
        h = g.channel_affine(h, sc, sh)?;
        h = g.relu6(h)?;
        run_blocks(g, store, &self.low_level, h)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frame_t: Var,
        frame_t1: Var,
    ) -> Result<EncoderVars> {
        let low_t = self.low_level_forward(g, store, frame_t)?;
        let low_t1 = self.low_level_forward(g, store, frame_t1)?;
        let temporal_input = temporal_feature(g, low_t, low_t1)?;
        let spatial = run_blocks(g, store, &self.spatial_path, low_t)?;
        let temporal = run_blocks(g, store, &self.temporal_path, temporal_input)?;
        Ok(EncoderVars {
            low_t,
            low_t1,
            temporal_input,
            spatial,
            temporal,
        })
    }

    /// Parameter handles of `f^s`.
    pub fn low_level_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.w, self.stem.scale, self.stem.shift];
        for b in &self.low_level {
            ids.extend(b.param_ids());
        }
        ids
    }
}

fn run_blocks(g: &mut Graph, store: &ParamStore, blocks: &[Block], x: Var) -> Result<Var> {
    blocks.iter().try_fold(x, |h, b| b.forward(g, store, h))
}

/// `cat(f_t, f_t - f_t1)`.
pub fn temporal_feature(g: &mut Graph, f_t: Var, f_t1: Var) -> Result<Var> {
    let d = g.sub(f_t, f_t1)?;
    Ok(g.concat_channels(f_t, d)?)
}

fn check_frame(config: &NetworkConfig, s: Shape) -> Result<()> {
    let r = config.input_resolution;
    if s.height != r || s.width != r {
        return Err(Error::Resolution {
            expected: r,
            actual: if s.height != r { s.height } else { s.width },
        });
    }
    if s.channels != FRAME_CHANNELS {
        return Err(Error::Tensor(crate::TensorError::Mismatch {
            op: "frame",
            dim: "channels",
            expected: FRAME_CHANNELS,
            actual: s.channels,
        }));
    }
    Ok(())
}

/// Spatial and temporal predictions of the student on a frame-pair batch.
#[derive(Clone, Copy, Debug)]
pub struct StudentVars {
    pub encoder: EncoderVars,
    pub spatial_map: Var,
    pub temporal_map: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutput {
    pub spatial_map: Tensor,
    pub temporal_map: Tensor,
}

/// The two-branch student `S`.
#[derive(Clone, Debug)]
pub struct StudentNet {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub spatial_head: Head,
    pub temporal_head: Head,
}

impl StudentNet {
    pub fn new<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config, &mut store, rng)?;
        let spatial_head = Head::new(&config.deconv, "head_spa", &mut store, rng);
        let temporal_head = Head::new(&config.deconv, "head_tem", &mut store, rng);
        Ok(StudentNet {
            config,
            store,
            encoder,
            spatial_head,
            temporal_head,
        })
    }

    pub fn forward(&self, g: &mut Graph, frame_t: Var, frame_t1: Var) -> Result<StudentVars> {
        check_frame(&self.config, g.shape(frame_t))?;
        check_frame(&self.config, g.shape(frame_t1))?;
        let st = &self.store;
        let encoder = self.encoder.forward(g, st, frame_t, frame_t1)?;
        let spatial_map = self.spatial_head.forward(g, st, encoder.spatial)?;
        let temporal_map = self.temporal_head.forward(g, st, encoder.temporal)?;
        Ok(StudentVars {
            encoder,
            spatial_map,
            temporal_map,
        })
    }

    /// Builds only the requested branches; `(spatial, temporal)` maps.
    pub fn forward_branches(
        &self,
        g: &mut Graph,
        frame_t: Var,
        frame_t1: Var,
        spatial: bool,
        temporal: bool,
    ) -> Result<(Option<Var>, Option<Var>)> {
        check_frame(&self.config, g.shape(frame_t))?;
        check_frame(&self.config, g.shape(frame_t1))?;
        let (st, enc) = (&self.store, &self.encoder);
        let low_t = enc.low_level_forward(g, st, frame_t)?;
        let spa = if spatial {
            let f = run_blocks(g, st, &enc.spatial_path, low_t)?;
            Some(self.spatial_head.forward(g, st, f)?)
        } else {
            None
        };
        let tem = if temporal {
            let low_t1 = enc.low_level_forward(g, st, frame_t1)?;
            let x = temporal_feature(g, low_t, low_t1)?;
            let f = run_blocks(g, st, &enc.temporal_path, x)?;
            Some(self.temporal_head.forward(g, st, f)?)
        } else {
            None
        };
        Ok((spa, tem))
    }

    pub fn predict(&self, frame_t: &Tensor, frame_t1: &Tensor) -> Result<StudentOutput> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(frame_t.clone()), g.constant(frame_t1.clone()));
        let v = self.forward(&mut g, a, b)?;
        Ok(StudentOutput {
            spatial_map: g.value(v.spatial_map).clone(),
            temporal_map: g.value(v.temporal_map).clone(),
        })
    }
}

/// The fused spatiotemporal network `S_sp`.
#[derive(Clone, Debug)]
pub struct SpatiotemporalNet {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub fusion: Vec<Block>,
    pub head: Head,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatiotemporalVars {
    pub encoder: EncoderVars,
    pub fused: Var,
    pub map: Var,
}

impl SpatiotemporalNet {
    pub fn new<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config, &mut store, rng)?;
        let fusion = config
            .fusion
            .iter()
            .enumerate()
            .map(|(i, &spec)| Block::new(spec, &format!("fuse{i}"), &mut store, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(&config.fusion_deconv, "head_fuse", &mut store, rng);
        Ok(SpatiotemporalNet {
            config,
            store,
            encoder,
            fusion,
            head,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        frame_t: Var,
        frame_t1: Var,
    ) -> Result<SpatiotemporalVars> {
        check_frame(&self.config, g.shape(frame_t))?;
        check_frame(&self.config, g.shape(frame_t1))?;
        let st = &self.store;
        let encoder = self.encoder.forward(g, st, frame_t, frame_t1)?;
        let cat = g.concat_channels(encoder.spatial, encoder.temporal)?;
        let fused = run_blocks(g, st, &self.fusion, cat)?;
        let map = self.head.forward(g, st, fused)?;
        Ok(SpatiotemporalVars {
            encoder,
            fused,
            map,
        })
    }

    pub fn predict(&self, frame_t: &Tensor, frame_t1: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(frame_t.clone()), g.constant(frame_t1.clone()));
        let v = self.forward(&mut g, a, b)?;
        Ok(g.value(v.map).clone())
    }

    /// Copies every `enc.` tensor of `student` into this network, bit-exact.
    /// Returns the number of tensors copied.
    pub fn transfer_encoder(&mut self, student: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let src = student
                .by_name(&name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            let dst = self.store.tensor_mut(id);
            if src.tensor.shape() != dst.shape() {
                return Err(Error::TransferShape {
                    name,
                    source_shape: src.tensor.shape(),
                    target_shape: dst.shape(),
                });
            }
            dst.data_mut().copy_from_slice(src.tensor.data());
            copied += 1;
        }
        Ok(copied)
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc."))
            .map(|(id, _)| id)
            .collect()
    }
}

/// Converts `[0, 1]` RGB to network input by subtracting [`FRAME_MEAN`].
pub fn normalize_frame(rgb: &Tensor) -> Tensor {
    let mut t = rgb.detached();
    let s = t.shape();
    let plane = s.plane();
    for b in 0..s.batch {
        for c in 0..s.channels {
            let off = (b * s.channels + c) * plane;
            let m = FRAME_MEAN[c % 3];
            t.data_mut()[off..off + plane]
                .iter_mut()
                .for_each(|v| *v -= m);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_configs_validate() {
        for r in SUPPORTED_RESOLUTIONS {
            for k in [BlockKind::Mb, BlockKind::MbSe, BlockKind::CaRes] {
                NetworkConfig::reference(r, k).validate().unwrap();
            }
        }
        assert!(NetworkConfig::reference(48, BlockKind::CaRes)
            .validate()
            .is_err());
    }

    #[test]
    fn encoder_stride_matches_deconvs() {
        let c = NetworkConfig::reference(64, BlockKind::CaRes);
        assert_eq!(c.encoder_stride(), 8);
        assert_eq!(c.deconv[1].deconv_out(c.deconv[0].deconv_out(8)), 64);
    }

    #[test]
    fn text_round_trip() {
        let c = NetworkConfig::reference(96, BlockKind::MbSe);
        assert_eq!(NetworkConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(NetworkConfig::from_text("resolution = 64\nwidth = 3\nblock_kind = mb").is_err());
    }

    #[test]
    fn miswired_table_is_rejected() {
        let mut c = NetworkConfig::reference(64, BlockKind::CaRes);
        c.fusion[0].in_channels = 64;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
