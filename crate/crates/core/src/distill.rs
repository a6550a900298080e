//! Teacher-student distillation of the two-branch student and joint
//! fine-tuning of the fused network.
//!
//! Step one trains the student on `L_spa + L_tem`, each branch loss being
//! `(1 - mu) l2(pred, Y) + mu l2(pred, T)` against the ground truth `Y` and
//! that branch's teacher map `T`. Step two copies the encoder into the
//! spatiotemporal network and trains it on the hard loss alone.

use std::fmt;

use log::info;
use rand::seq::SliceRandom;

use crate::data::FrameSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::maps::{gaussian_blur, normalize_max, resample_bilinear, shift};
use crate::metrics::SaliencyMap;
use crate::networks::{NetworkConfig, SpatiotemporalNet, StudentNet};
use crate::params::ParamStore;
use crate::rng::{self, purpose};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_LR: f64 = 5e-4;
pub const DEFAULT_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Spatial,
    Temporal,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Spatial => "spatial",
            Branch::Temporal => "temporal",
        }
    }
}

// ---- teachers -----------------------------------------------------------

/// Source of soft-target maps per `(clip, frame, branch)`.
pub trait TeacherProvider {
    fn teacher_map(&self, clip: &str, frame: usize, branch: Branch) -> Option<SaliencyMap>;
}

/// Stand-in teacher for synthetic data: the spatial map is `Y` blurred with
/// `sigma = width / 16`; the temporal map is `Y` moved by `motion` pixels and
/// blurred the same way. Both are scaled to max 1.
pub fn synthetic_teacher(y: &SaliencyMap, branch: Branch, motion: (f64, f64)) -> SaliencyMap {
    let sigma = y.width as f64 / 16.0;
    let src = match branch {
        Branch::Spatial => y.clone(),
        Branch::Temporal => shift(y, motion.0, motion.1),
    };
    normalize_max(gaussian_blur(&src, sigma))
}

/// Synthetic teacher over in-memory samples, with per-clip motion estimated
/// from the ground-truth peaks of consecutive frames.
#[derive(Clone, Debug, Default)]
pub struct SyntheticTeacher {
    maps: std::collections::HashMap<(String, usize), (SaliencyMap, (f64, f64))>,
}

impl SyntheticTeacher {
    pub fn from_samples(samples: &[FrameSample]) -> Self {
        let mut by_clip: std::collections::BTreeMap<&str, Vec<&FrameSample>> = Default::default();
        for s in samples {
            by_clip.entry(&s.clip).or_default().push(s);
        }
        let mut maps = std::collections::HashMap::new();
        for (clip, mut list) in by_clip {
            list.sort_by_key(|s| s.index);
            let peaks: Vec<(usize, (usize, usize))> =
                list.iter().map(|s| (s.index, s.gt.argmax())).collect();
            let mut motion = (0.0, 0.0);
            let steps: Vec<_> = peaks.windows(2).filter(|w| w[1].0 == w[0].0 + 1).collect();
            if !steps.is_empty() {
                let n = steps.len() as f64;
                motion.0 = steps
                    .iter()
                    .map(|w| w[1].1 .0 as f64 - w[0].1 .0 as f64)
                    .sum::<f64>()
                    / n;
                motion.1 = steps
                    .iter()
                    .map(|w| w[1].1 .1 as f64 - w[0].1 .1 as f64)
                    .sum::<f64>()
                    / n;
            }
            for s in list {
                maps.insert((clip.to_string(), s.index), (s.gt.clone(), motion));
            }
        }
        SyntheticTeacher { maps }
    }
}

impl TeacherProvider for SyntheticTeacher {
    fn teacher_map(&self, clip: &str, frame: usize, branch: Branch) -> Option<SaliencyMap> {
        let (y, motion) = self.maps.get(&(clip.to_string(), frame))?;
        Some(synthetic_teacher(y, branch, *motion))
    }
}

// ---- losses -------------------------------------------------------------

/// Mean squared difference over all pixels.
pub fn l2_map_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    Ok(g.mse(pred, target)?)
}

/// `(1 - mu) l2(pred, y) + mu l2(pred, teacher)`.
pub fn branch_loss(g: &mut Graph, pred: Var, y: Var, teacher: Var, mu: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("mu {mu} outside [0, 1]")));
    }
    let hard = l2_map_loss(g, pred, y)?;
    let soft = l2_map_loss(g, pred, teacher)?;
    let hard = g.scale(hard, 1.0 - mu)?;
    let soft = g.scale(soft, mu)?;
    Ok(g.add(hard, soft)?)
}

/// Hard loss of the fused prediction.
pub fn joint_loss(g: &mut Graph, pred: Var, y: Var) -> Result<Var> {
    l2_map_loss(g, pred, y)
}

// ---- optimizer ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments and training position for one parameter store.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub seed: u64,
    pub mu: f64,
}

impl TrainState {
    pub fn new(store: &ParamStore, adam: AdamConfig, seed: u64, mu: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        TrainState {
            adam,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            seed,
            mu,
        }
    }

    /// One bias-corrected Adam update of every trainable parameter from its
    /// gradient slot; a missing slot counts as zero. Nothing is updated if
    /// any gradient is non-finite.
    pub fn adam_step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable
                && p.tensor
                    .grad()
                    .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.adam;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p
                .tensor
                .grad()
                .map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---- batching -----------------------------------------------------------

fn stack<'a>(items: impl ExactSizeIterator<Item = &'a Tensor>) -> Tensor {
    let n = items.len();
    let mut data = Vec::new();
    let mut shape = None;
    for t in items {
        shape.get_or_insert(t.shape());
        data.extend_from_slice(t.data());
    }
    let s = shape.expect("non-empty batch");
    Tensor::new(Shape::new(n, s.channels, s.height, s.width), data).expect("uniform batch")
}

fn stack_maps<'a>(items: impl ExactSizeIterator<Item = &'a SaliencyMap>) -> Tensor {
    let n = items.len();
    let mut data = Vec::new();
    let mut dims = (0, 0);
    for m in items {
        dims = m.dims();
        data.extend_from_slice(&m.values);
    }
    Tensor::new(Shape::new(n, 1, dims.1, dims.0), data).expect("uniform batch")
}

fn batches(n: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(batch)).map(move |b| b * batch..((b + 1) * batch).min(n))
}

// ---- step one ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mu: f64,
    pub seed: u64,
    pub spatial_weight: f64,
    pub temporal_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 5,
            batch_size: DEFAULT_BATCH,
            adam: AdamConfig::default(),
            mu: DEFAULT_MU,
            seed: 0,
            spatial_weight: 1.0,
            temporal_weight: 1.0,
        }
    }
}

/// Mean losses over one pass; epoch 0 is the untrained network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillRecord {
    pub epoch: usize,
    pub spatial: f64,
    pub temporal: f64,
}

impl DistillRecord {
    pub fn total(&self, cfg: &DistillConfig) -> f64 {
        cfg.spatial_weight * self.spatial + cfg.temporal_weight * self.temporal
    }
}

impl fmt::Display for DistillRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} l_spa {:.6e} l_tem {:.6e}",
            self.epoch, self.spatial, self.temporal
        )
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub net: StudentNet,
    pub state: TrainState,
    pub log: Vec<DistillRecord>,
}

struct Targets {
    spatial: Vec<Option<SaliencyMap>>,
    temporal: Vec<Option<SaliencyMap>>,
}

fn gather_teachers<T: TeacherProvider + ?Sized>(
    samples: &[FrameSample],
    teachers: &T,
    cfg: &DistillConfig,
) -> Result<Targets> {
    let mut out = Targets {
        spatial: Vec::with_capacity(samples.len()),
        temporal: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        for (branch, weight, col) in [
            (Branch::Spatial, cfg.spatial_weight, &mut out.spatial),
            (Branch::Temporal, cfg.temporal_weight, &mut out.temporal),
        ] {
            if cfg.mu == 0.0 || weight == 0.0 {
                col.push(None);
                continue;
            }
            let m = teachers
                .teacher_map(&s.clip, s.index, branch)
                .ok_or_else(|| Error::MissingTeacher {
                    clip: s.clip.clone(),
                    frame: s.index,
                    branch: branch.name(),
                })?;
            col.push(Some(resample_bilinear(&m, s.gt.width, s.gt.height)));
        }
    }
    Ok(out)
}

struct BranchTerm {
    weight: f64,
    pred: Var,
    teacher: Option<Var>,
}

fn distill_batch(
    net: &StudentNet,
    samples: &[FrameSample],
    targets: &Targets,
    range: std::ops::Range<usize>,
    cfg: &DistillConfig,
) -> Result<(Graph, Var, f64, f64)> {
    let idx = &samples[range.clone()];
    let mut g = Graph::new();
    let a = g.constant(stack(idx.iter().map(|s| &s.frame_t)));
    let b = g.constant(stack(idx.iter().map(|s| &s.frame_t1)));
    let y = g.constant(stack_maps(idx.iter().map(|s| &s.gt)));
    let (spa, tem) = net.forward_branches(
        &mut g,
        a,
        b,
        cfg.spatial_weight != 0.0,
        cfg.temporal_weight != 0.0,
    )?;
    let mut terms = Vec::new();
    for (weight, pred, col) in [
        (cfg.spatial_weight, spa, &targets.spatial),
        (cfg.temporal_weight, tem, &targets.temporal),
    ] {
        let Some(pred) = pred else { continue };
        let teacher = if cfg.mu > 0.0 {
            let maps: Vec<&SaliencyMap> = col[range.clone()]
                .iter()
                .map(|m| m.as_ref().expect("gathered"))
                .collect();
            Some(g.constant(stack_maps(maps.into_iter())))
        } else {
            None
        };
        terms.push(BranchTerm {
            weight,
            pred,
            teacher,
        });
    }
    let mut losses = Vec::new();
    for t in &terms {
        let l = match t.teacher {
            Some(tv) => branch_loss(&mut g, t.pred, y, tv, cfg.mu)?,
            None => l2_map_loss(&mut g, t.pred, y)?,
        };
        losses.push((t.weight, l));
    }
    let mut values = [0.0, 0.0];
    let mut k = 0;
    for (slot, pred) in [spa, tem].iter().enumerate() {
        if pred.is_some() {
            values[slot] = g.value(losses[k].1).item()?;
            k += 1;
        }
    }
    let mut total: Option<Var> = None;
    for (w, l) in losses {
        let wl = g.scale(l, w)?;
        total = Some(match total {
            Some(t) => g.add(t, wl)?,
            None => wl,
        });
    }
    let total = total.ok_or_else(|| Error::Config("both branch weights are zero".into()))?;
    Ok((g, total, values[0], values[1]))
}

fn check_samples(samples: &[FrameSample], batch: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// Mean branch losses of `net` over `samples` without updating anything.
pub fn evaluate_distill<T: TeacherProvider + ?Sized>(
    net: &StudentNet,
    samples: &[FrameSample],
    teachers: &T,
    cfg: &DistillConfig,
) -> Result<(f64, f64)> {
    check_samples(samples, cfg.batch_size)?;
    let targets = gather_teachers(samples, teachers, cfg)?;
    let (mut s, mut t) = (0.0, 0.0);
    for r in batches(samples.len(), cfg.batch_size) {
        let n = r.len() as f64;
        let (_, _, ls, lt) = distill_batch(net, samples, &targets, r, cfg)?;
        s += n * ls;
        t += n * lt;
    }
    let n = samples.len() as f64;
    Ok((s / n, t / n))
}

/// Trains a freshly initialized student on `samples`.
pub fn train_distill<T: TeacherProvider + ?Sized>(
    samples: &[FrameSample],
    teachers: &T,
    config: &NetworkConfig,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    check_samples(samples, cfg.batch_size)?;
    let net = StudentNet::new(config.clone(), &mut rng::stream(cfg.seed, purpose::INIT))?;
    continue_distill(net, samples, teachers, cfg)
}

/// Trains an existing student; the returned log starts with its epoch-0 losses.
pub fn continue_distill<T: TeacherProvider + ?Sized>(
    mut net: StudentNet,
    samples: &[FrameSample],
    teachers: &T,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    check_samples(samples, cfg.batch_size)?;
    if cfg.spatial_weight == 0.0 && cfg.temporal_weight == 0.0 {
        return Err(Error::Config("both branch weights are zero".into()));
    }
    let targets = gather_teachers(samples, teachers, cfg)?;
    let mut state = TrainState::new(&net.store, cfg.adam, cfg.seed, cfg.mu);
    let mut shuffle = rng::stream(cfg.seed, purpose::SHUFFLE);
    let (s0, t0) = evaluate_distill(&net, samples, teachers, cfg)?;
    let mut log = vec![DistillRecord {
        epoch: 0,
        spatial: s0,
        temporal: t0,
    }];
    info!("{}", log[0]);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let epoch_samples: Vec<FrameSample> = order.iter().map(|&i| samples[i].clone()).collect();
        let epoch_targets = Targets {
            spatial: order.iter().map(|&i| targets.spatial[i].clone()).collect(),
            temporal: order.iter().map(|&i| targets.temporal[i].clone()).collect(),
        };
        let (mut s, mut t) = (0.0, 0.0);
        for r in batches(samples.len(), cfg.batch_size) {
            let n = r.len() as f64;
            let (g, loss, ls, lt) = distill_batch(&net, &epoch_samples, &epoch_targets, r, cfg)?;
            net.store.zero_grad();
            g.backward(loss, &mut net.store)?;
            state.adam_step(&mut net.store)?;
            s += n * ls;
            t += n * lt;
        }
        let n = samples.len() as f64;
        let rec = DistillRecord {
            epoch,
            spatial: s / n,
            temporal: t / n,
        };
        info!("{rec}");
        log.push(rec);
    }
    Ok(DistillOutcome { net, state, log })
}

// ---- step two ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct JointConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Keep the transferred encoder fixed and train only the fusion subnet.
    pub freeze_encoder: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            epochs: 10,
            batch_size: DEFAULT_BATCH,
            adam: AdamConfig::default(),
            seed: 0,
            freeze_encoder: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointRecord {
    pub epoch: usize,
    pub joint: f64,
}

impl fmt::Display for JointRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} l_sp {:.6e}", self.epoch, self.joint)
    }
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub net: SpatiotemporalNet,
    pub state: TrainState,
    pub log: Vec<JointRecord>,
}

/// Builds the spatiotemporal network for `student`'s config with a fresh
/// fusion subnet and the student's encoder copied in.
pub fn transfer(student: &StudentNet, seed: u64) -> Result<SpatiotemporalNet> {
    let mut sp = SpatiotemporalNet::new(
        student.config.clone(),
        &mut rng::stream(seed, purpose::FUSION_INIT),
    )?;
    sp.transfer_encoder(&student.store)?;
    Ok(sp)
}

fn joint_batch(net: &SpatiotemporalNet, samples: &[FrameSample]) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let a = g.constant(stack(samples.iter().map(|s| &s.frame_t)));
    let b = g.constant(stack(samples.iter().map(|s| &s.frame_t1)));
    let y = g.constant(stack_maps(samples.iter().map(|s| &s.gt)));
    let v = net.forward(&mut g, a, b)?;
    let l = joint_loss(&mut g, v.map, y)?;
    Ok((g, l))
}

/// Mean joint loss over `samples`.
pub fn evaluate_joint(
    net: &SpatiotemporalNet,
    samples: &[FrameSample],
    batch: usize,
) -> Result<f64> {
    check_samples(samples, batch)?;
    let mut total = 0.0;
    for r in batches(samples.len(), batch) {
        let n = r.len() as f64;
        let (g, l) = joint_batch(net, &samples[r])?;
        total += n * g.value(l).item()?;
    }
    Ok(total / samples.len() as f64)
}

/// Transfers `student` into a new spatiotemporal network and fine-tunes it.
pub fn transfer_and_finetune(
    student: &StudentNet,
    samples: &[FrameSample],
    cfg: &JointConfig,
) -> Result<JointOutcome> {
    let net = transfer(student, cfg.seed)?;
    finetune(net, samples, cfg)
}

pub fn finetune(
    mut net: SpatiotemporalNet,
    samples: &[FrameSample],
    cfg: &JointConfig,
) -> Result<JointOutcome> {
    check_samples(samples, cfg.batch_size)?;
    for id in net.encoder_param_ids() {
        net.store.get_mut(id).trainable = !cfg.freeze_encoder;
    }
    let mut state = TrainState::new(&net.store, cfg.adam, cfg.seed, 0.0);
    let mut shuffle = rng::stream(cfg.seed, purpose::SHUFFLE);
    let mut log = vec![JointRecord {
        epoch: 0,
        joint: evaluate_joint(&net, samples, cfg.batch_size)?,
    }];
    info!("{}", log[0]);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for r in batches(samples.len(), cfg.batch_size) {
            let batch: Vec<FrameSample> = order[r.clone()]
                .iter()
                .map(|&i| samples[i].clone())
                .collect();
            let (g, l) = joint_batch(&net, &batch)?;
            net.store.zero_grad();
            g.backward(l, &mut net.store)?;
            state.adam_step(&mut net.store)?;
            total += r.len() as f64 * g.value(l).item()?;
        }
        let rec = JointRecord {
            epoch,
            joint: total / samples.len() as f64,
        };
        info!("{rec}");
        log.push(rec);
    }
    Ok(JointOutcome { net, state, log })
}
