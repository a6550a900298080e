//! Saliency evaluation metrics: AUC (Judd), shuffled AUC, NSS, CC and SIM.
//!
//! AUC variants are computed as `P(pos > neg) + 0.5 P(pos = neg)` by ranking,
//! which is the trapezoidal ROC area over every distinct threshold.

use rand::seq::index::sample;

use crate::rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{metric}: fixation set is empty")]
    NoFixations { metric: &'static str },
    #[error("{metric}: {map} map has zero variance")]
    ZeroVariance {
        metric: &'static str,
        map: &'static str,
    },
    #[error("{metric}: {map} map sums to zero")]
    ZeroSum {
        metric: &'static str,
        map: &'static str,
    },
    #[error("{metric}: every pixel is fixated, no negatives")]
    NoNegatives { metric: &'static str },
    #[error("{metric}: negative pool is empty")]
    EmptyPool { metric: &'static str },
    #[error("{metric}: map is {actual:?}, expected {expected:?}")]
    Dims {
        metric: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("fixation ({x}, {y}) outside {width}x{height} frame")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
}

type Res<T> = std::result::Result<T, MetricError>;

/// Single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "map data length");
        SaliencyMap {
            width,
            height,
            values,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        SaliencyMap {
            width,
            height,
            values,
        }
    }

    /// First channel of batch item 0.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        SaliencyMap::new(s.width, s.height, t.data()[..s.plane()].to_vec())
    }

    /// Channel `c` of batch item `b`.
    pub fn from_tensor_at(t: &Tensor, b: usize, c: usize) -> Self {
        let s = t.shape();
        let off = (b * s.channels + c) * s.plane();
        SaliencyMap::new(s.width, s.height, t.data()[off..off + s.plane()].to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            Shape::new(1, 1, self.height, self.width),
            self.values.clone(),
        )
        .expect("consistent map")
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixationSet {
    pub width: usize,
    pub height: usize,
    pub points: Vec<(usize, usize)>,
}

impl FixationSet {
    pub fn new(width: usize, height: usize, points: Vec<(usize, usize)>) -> Res<Self> {
        for &(x, y) in &points {
            if x >= width || y >= height {
                return Err(MetricError::OutOfBounds {
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(FixationSet {
            width,
            height,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.width * self.height];
        for &(x, y) in &self.points {
            m[y * self.width + x] = true;
        }
        m
    }
}

fn check_dims(metric: &'static str, map: &SaliencyMap, fix: &FixationSet) -> Res<()> {
    if map.dims() != (fix.width, fix.height) {
        return Err(MetricError::Dims {
            metric,
            expected: (fix.width, fix.height),
            actual: map.dims(),
        });
    }
    if fix.is_empty() {
        return Err(MetricError::NoFixations { metric });
    }
    Ok(())
}

fn check_pair(metric: &'static str, a: &SaliencyMap, b: &SaliencyMap) -> Res<()> {
    if a.dims() != b.dims() {
        return Err(MetricError::Dims {
            metric,
            expected: b.dims(),
            actual: a.dims(),
        });
    }
    Ok(())
}

/// Mean and population variance; `None` for a constant map, whose computed
/// variance may otherwise be a rounding residue.
fn mean_var(v: &[f64]) -> Option<(f64, f64)> {
    let first = *v.first()?;
    if v.iter().all(|&x| x == first) {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var))
}

/// Mean of the z-scored map (population std) at the fixations.
pub fn nss(pred: &SaliencyMap, fix: &FixationSet) -> Res<f64> {
    check_dims("nss", pred, fix)?;
    let (mean, var) = mean_var(&pred.values).ok_or(MetricError::ZeroVariance {
        metric: "nss",
        map: "predicted",
    })?;
    let std = var.sqrt();
    let total: f64 = fix
        .points
        .iter()
        .map(|&(x, y)| (pred.at(x, y) - mean) / std)
        .sum();
    Ok(total / fix.len() as f64)
}

/// Pearson correlation over pixels.
pub fn cc(pred: &SaliencyMap, gt: &SaliencyMap) -> Res<f64> {
    check_pair("cc", pred, gt)?;
    let (ma, va) = mean_var(&pred.values).ok_or(MetricError::ZeroVariance {
        metric: "cc",
        map: "predicted",
    })?;
    let (mb, vb) = mean_var(&gt.values).ok_or(MetricError::ZeroVariance {
        metric: "cc",
        map: "ground-truth",
    })?;
    let n = pred.values.len() as f64;
    let cov: f64 = pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| (a - ma) * (b - mb))
        .sum::<f64>()
        / n;
    // sqrt of the product keeps cc(x, x) exactly 1
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Histogram intersection of the two maps normalized to unit sum.
pub fn sim(pred: &SaliencyMap, gt: &SaliencyMap) -> Res<f64> {
    check_pair("sim", pred, gt)?;
    let sa: f64 = pred.values.iter().sum();
    let sb: f64 = gt.values.iter().sum();
    if sa == 0.0 {
        return Err(MetricError::ZeroSum {
            metric: "sim",
            map: "predicted",
        });
    }
    if sb == 0.0 {
        return Err(MetricError::ZeroSum {
            metric: "sim",
            map: "ground-truth",
        });
    }
    let mut identical = true;
    let mut total = 0.0;
    for (a, b) in pred.values.iter().zip(&gt.values) {
        let (p, q) = (a / sa, b / sb);
        identical &= p == q;
        total += p.min(q);
    }
    // the unit-sum normalization is itself rounded; pin the identical case
    Ok(if identical { 1.0 } else { total.min(1.0) })
}

/// `P(p > n) + 0.5 P(p = n)` over all positive/negative pairs.
pub fn rank_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut score = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        score += below as f64 + 0.5 * (not_above - below) as f64;
    }
    score / (positives.len() as f64 * neg.len() as f64)
}

/// Judd AUC: one positive per fixation, every non-fixated pixel a negative.
pub fn auc_judd(pred: &SaliencyMap, fix: &FixationSet) -> Res<f64> {
    check_dims("auc", pred, fix)?;
    let mask = fix.mask();
    let positives: Vec<f64> = fix.points.iter().map(|&(x, y)| pred.at(x, y)).collect();
    let negatives: Vec<f64> = pred
        .values
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .collect();
    if negatives.is_empty() {
        return Err(MetricError::NoNegatives { metric: "auc" });
    }
    Ok(rank_auc(&positives, &negatives))
}

/// Maximum number of shuffled negatives per positive.
pub const SAUC_NEGATIVE_RATIO: usize = 10;

/// Shuffled AUC: negatives are fixations of other frames, minus any point
/// fixated in this frame, subsampled without replacement to at most
/// [`SAUC_NEGATIVE_RATIO`] per positive.
pub fn sauc(pred: &SaliencyMap, fix: &FixationSet, pool: &[FixationSet], seed: u64) -> Res<f64> {
    check_dims("sauc", pred, fix)?;
    let mask = fix.mask();
    let mut candidates = Vec::new();
    for other in pool {
        if (other.width, other.height) != pred.dims() {
            return Err(MetricError::Dims {
                metric: "sauc",
                expected: pred.dims(),
                actual: (other.width, other.height),
            });
        }
        for &(x, y) in &other.points {
            if !mask[y * fix.width + x] {
                candidates.push(pred.at(x, y));
            }
        }
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyPool { metric: "sauc" });
    }
    let n = candidates.len().min(SAUC_NEGATIVE_RATIO * fix.len());
    let mut r = rng::stream(seed, rng::purpose::SAUC);
    let negatives: Vec<f64> = sample(&mut r, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let positives: Vec<f64> = fix.points.iter().map(|&(x, y)| pred.at(x, y)).collect();
    Ok(rank_auc(&positives, &negatives))
}

/// Sum of isotropic Gaussians at the fixations, scaled to max 1.
pub fn density_from_fixations(fix: &FixationSet, sigma: f64) -> SaliencyMap {
    let (w, h) = (fix.width, fix.height);
    let mut values = vec![0.0; w * h];
    if sigma <= 0.0 {
        for &(x, y) in &fix.points {
            values[y * w + x] += 1.0;
        }
    } else {
        let k = -0.5 / (sigma * sigma);
        for &(fx, fy) in &fix.points {
            for y in 0..h {
                let dy = y as f64 - fy as f64;
                for x in 0..w {
                    let dx = x as f64 - fx as f64;
                    values[y * w + x] += (k * (dx * dx + dy * dy)).exp();
                }
            }
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    SaliencyMap::new(w, h, values)
}

/// Per-metric scores of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameScores {
    pub auc: f64,
    pub sauc: f64,
    pub nss: f64,
    pub sim: f64,
    pub cc: f64,
}

impl FrameScores {
    pub const NAMES: [&'static str; 5] = ["AUC", "sAUC", "NSS", "SIM", "CC"];

    pub fn values(&self) -> [f64; 5] {
        [self.auc, self.sauc, self.nss, self.sim, self.cc]
    }
}

/// All five metrics for one frame.
pub fn score_frame(
    pred: &SaliencyMap,
    gt: &SaliencyMap,
    fix: &FixationSet,
    pool: &[FixationSet],
    seed: u64,
) -> Res<FrameScores> {
    Ok(FrameScores {
        auc: auc_judd(pred, fix)?,
        sauc: sauc(pred, fix, pool, seed)?,
        nss: nss(pred, fix)?,
        sim: sim(pred, gt)?,
        cc: cc(pred, gt)?,
    })
}
