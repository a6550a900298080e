//! Dataset layout, frame-pair loading and the synthetic moving-blob corpus.
//!
//! ```text
//! root/splits.txt                  "clipNNN train|val|test" per line
//! root/clipNNN/frames/F0000.ppm    RGB frames
//! root/clipNNN/gt/F0000.pgm        ground-truth density maps
//! root/clipNNN/fix/F0000.txt       fixations, one "x y" line each
//! root/clipNNN/teacher_spa/F0000.pgm
//! root/clipNNN/teacher_tem/F0000.pgm
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::distill::{synthetic_teacher, Branch, TeacherProvider};
use crate::error::{Error, Result};
use crate::maps::resample_bilinear;
use crate::metrics::{FixationSet, SaliencyMap};
use crate::netpbm;
use crate::networks::{normalize_frame, SUPPORTED_RESOLUTIONS};
use crate::rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// One frame pair `(I_t, I_t+1)` with the annotations of frame `t`.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub clip: String,
    pub index: usize,
    /// Normalized, `[1, 3, r, r]`.
    pub frame_t: Tensor,
    pub frame_t1: Tensor,
    pub gt: SaliencyMap,
    pub fixations: FixationSet,
}

#[derive(Clone, Debug, Default)]
pub struct ClipEntry {
    pub id: String,
    pub split: Option<Split>,
    pub frames: Vec<PathBuf>,
    pub gt: Vec<Option<PathBuf>>,
    pub fixations: Vec<Option<PathBuf>>,
    pub teacher_spa: Vec<Option<PathBuf>>,
    pub teacher_tem: Vec<Option<PathBuf>>,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub clips: Vec<ClipEntry>,
}

pub fn frame_name(i: usize, ext: &str) -> String {
    format!("F{i:04}.{ext}")
}

fn optional(dir: &Path, name: String) -> Option<PathBuf> {
    let p = dir.join(name);
    p.is_file().then_some(p)
}

/// Reads `splits.txt` and enumerates the files of every listed clip.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let splits_path = root.join("splits.txt");
    let text = fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
    let mut clips = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format {
                path: splits_path.clone(),
                offset: start,
                message: "expected `clip split`".into(),
            });
        };
        let split = split.parse::<Split>().map_err(|_| Error::Format {
            path: splits_path.clone(),
            offset: start,
            message: format!("unknown split `{split}`"),
        })?;
        clips.push(scan_clip(root, id, split)?);
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        clips,
    })
}

fn scan_clip(root: &Path, id: &str, split: Split) -> Result<ClipEntry> {
    let dir = root.join(id);
    let frames_dir = dir.join("frames");
    let mut frames = Vec::new();
    while let Some(p) = optional(&frames_dir, frame_name(frames.len(), "ppm")) {
        frames.push(p);
    }
    if frames.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no frames found",
            frames_dir.display()
        )));
    }
    let column = |sub: &str, ext: &str| -> Vec<Option<PathBuf>> {
        (0..frames.len())
            .map(|i| optional(&dir.join(sub), frame_name(i, ext)))
            .collect()
    };
    Ok(ClipEntry {
        id: id.to_string(),
        split: Some(split),
        gt: column("gt", "pgm"),
        fixations: column("fix", "txt"),
        teacher_spa: column("teacher_spa", "pgm"),
        teacher_tem: column("teacher_tem", "pgm"),
        frames,
    })
}

/// One `x y` pair per line, 0-indexed.
pub fn read_fixations(path: &Path, width: usize, height: usize) -> Result<FixationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            offset: start,
            message: m.to_string(),
        };
        let mut it = body.split_whitespace().map(|v| v.parse::<usize>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => {
                if x >= width || y >= height {
                    return Err(bad(&format!(
                        "fixation ({x}, {y}) outside {width}x{height} frame"
                    )));
                }
                points.push((x, y));
            }
            _ => return Err(bad("expected `x y`")),
        }
    }
    Ok(FixationSet::new(width, height, points)?)
}

pub fn write_fixations(path: &Path, fix: &FixationSet) -> Result<()> {
    let text: String = fix
        .points
        .iter()
        .map(|(x, y)| format!("{x} {y}\n"))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_map(path: &Path) -> Result<SaliencyMap> {
    Ok(SaliencyMap::from_tensor(&netpbm::read_pgm(path)?))
}

impl DatasetIndex {
    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == Some(split))
    }

    /// Loads every frame pair of `split`. Pairs whose frame `t` lacks a
    /// ground-truth map are skipped with a warning.
    pub fn samples(&self, split: Split, resolution: usize) -> Result<Vec<FrameSample>> {
        let mut out = Vec::new();
        for clip in self.clips_in(split) {
            let mut next: Option<Tensor> = None;
            for t in 0..clip.frames.len().saturating_sub(1) {
                let frame_t = match next.take() {
                    Some(f) => f,
                    None => load_frame(&clip.frames[t], resolution)?,
                };
                let frame_t1 = load_frame(&clip.frames[t + 1], resolution)?;
                next = Some(frame_t1.clone());
                let Some(gt_path) = &clip.gt[t] else {
                    warn!("{}: frame {t} has no ground truth, pair skipped", clip.id);
                    continue;
                };
                let gt = read_map(gt_path)?;
                if gt.dims() != (resolution, resolution) {
                    return Err(Error::Resolution {
                        expected: resolution,
                        actual: gt.width,
                    });
                }
                let fixations = match &clip.fixations[t] {
                    Some(p) => read_fixations(p, resolution, resolution)?,
                    None => {
                        warn!("{}: frame {t} has no fixation file", clip.id);
                        FixationSet::new(resolution, resolution, Vec::new())?
                    }
                };
                out.push(FrameSample {
                    clip: clip.id.clone(),
                    index: t,
                    frame_t: normalize_frame(&frame_t),
                    frame_t1: normalize_frame(&frame_t1),
                    gt,
                    fixations,
                });
            }
        }
        Ok(out)
    }
}

fn load_frame(path: &Path, resolution: usize) -> Result<Tensor> {
    let f = netpbm::read_ppm(path)?;
    let s = f.shape();
    if s.height != resolution || s.width != resolution {
        return Err(Error::Resolution {
            expected: resolution,
            actual: if s.height != resolution {
                s.height
            } else {
                s.width
            },
        });
    }
    Ok(f)
}

/// Teacher maps read from `teacher_spa/` and `teacher_tem/`, resampled to
/// the working resolution.
#[derive(Clone, Debug, Default)]
pub struct FileTeacher {
    maps: HashMap<(String, usize, Branch), SaliencyMap>,
}

impl FileTeacher {
    pub fn load(index: &DatasetIndex, resolution: usize) -> Result<Self> {
        let mut maps = HashMap::new();
        for clip in &index.clips {
            for (branch, col) in [
                (Branch::Spatial, &clip.teacher_spa),
                (Branch::Temporal, &clip.teacher_tem),
            ] {
                for (t, p) in col.iter().enumerate() {
                    if let Some(p) = p {
                        let m = resample_bilinear(&read_map(p)?, resolution, resolution);
                        maps.insert((clip.id.clone(), t, branch), m);
                    }
                }
            }
        }
        Ok(FileTeacher { maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

impl TeacherProvider for FileTeacher {
    fn teacher_map(&self, clip: &str, frame: usize, branch: Branch) -> Option<SaliencyMap> {
        self.maps.get(&(clip.to_string(), frame, branch)).cloned()
    }
}

// ---- synthetic corpus ------------------------------------------------------

pub const FIXATIONS_PER_FRAME: usize = 20;

/// Ground-truth and blob width for a resolution.
pub fn gt_sigma(resolution: usize) -> f64 {
    resolution as f64 / 16.0
}

/// Parameters of one generated clip, for checks against the rendered data.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub start: (i64, i64),
    pub velocity: (i64, i64),
    pub split: Split,
}

impl SyntheticClip {
    pub fn center(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + self.velocity.0 * t as i64,
            self.start.1 + self.velocity.1 * t as i64,
        )
    }
}

const TARGET_COLOR: [f64; 3] = [0.95, 0.35, 0.2];
const DISTRACTOR_COLOR: [f64; 3] = [0.3, 0.85, 0.4];
const DISTRACTORS: usize = 2;

fn gaussian(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

struct Scene {
    texture: Vec<f64>,
    distractors: Vec<(f64, f64)>,
}

fn render(scene: &Scene, center: (i64, i64), r: usize) -> Tensor {
    let sigma = gt_sigma(r);
    let plane = r * r;
    let mut data = scene.texture.clone();
    let mut blend = |cx: f64, cy: f64, color: &[f64; 3]| {
        for y in 0..r {
            for x in 0..r {
                let a = 0.9 * gaussian(x as f64 - cx, y as f64 - cy, sigma);
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut data[c * plane + y * r + x];
                    *v = (1.0 - a) * *v + a * col;
                }
            }
        }
    };
    for &(dx, dy) in &scene.distractors {
        blend(dx, dy, &DISTRACTOR_COLOR);
    }
    blend(center.0 as f64, center.1 as f64, &TARGET_COLOR);
    Tensor::new(Shape::new(1, 3, r, r), data).expect("frame shape")
}

fn texture<R: Rng>(rng: &mut R, r: usize) -> Vec<f64> {
    let plane = r * r;
    let base: f64 = rng.random_range(0.3..0.5);
    let mut data = vec![0.0; 3 * plane];
    let waves: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / r as f64,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / r as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                let mut v = base;
                for w in &waves {
                    let tint = 1.0 + 0.5 * (w[4] - 0.5) * (c as f64 - 1.0);
                    v += w[3] * tint * (w[0] * x as f64 + w[1] * y as f64 + w[2]).sin();
                }
                data[c * plane + y * r + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    data
}

/// Gaussian of width [`gt_sigma`] centered on integer pixel `c`, max 1.
pub fn gt_map(center: (i64, i64), r: usize) -> SaliencyMap {
    let s = gt_sigma(r);
    SaliencyMap::from_fn(r, r, |x, y| {
        gaussian(x as f64 - center.0 as f64, y as f64 - center.1 as f64, s)
    })
}

/// Draws `n` pixels with probability proportional to `map`.
pub fn sample_fixations<R: Rng>(map: &SaliencyMap, n: usize, rng: &mut R) -> FixationSet {
    let dist = WeightedIndex::new(&map.values).expect("positive density");
    let points = (0..n)
        .map(|_| {
            let i = dist.sample(rng);
            (i % map.width, i / map.width)
        })
        .collect();
    FixationSet::new(map.width, map.height, points).expect("in-bounds fixations")
}

/// Split sizes for `n` clips: test and val take a fifth and a tenth.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (n / 5).max(usize::from(n >= 3));
    let val = (n / 10).max(usize::from(n >= 3));
    (n - test - val, val, test)
}

/// Renders a corpus of moving-blob clips into `out_dir` and returns its index
/// together with the generating parameters of each clip.
pub fn gen_synthetic(
    out_dir: &Path,
    n_clips: usize,
    frames_per_clip: usize,
    resolution: usize,
    seed: u64,
) -> Result<(DatasetIndex, Vec<SyntheticClip>)> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::Config(format!(
            "resolution {resolution} not one of {SUPPORTED_RESOLUTIONS:?}"
        )));
    }
    if frames_per_clip < 2 || n_clips == 0 {
        return Err(Error::Config("need at least one clip of two frames".into()));
    }
    let r = resolution;
    let mut rng = rng::stream(seed, rng::purpose::DATA);

    let mut order: Vec<usize> = (0..n_clips).collect();
    order.shuffle(&mut rng);
    let (train, val, _) = split_sizes(n_clips);
    let mut splits = vec![Split::Test; n_clips];
    for (rank, &c) in order.iter().enumerate() {
        splits[c] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out_dir)?;
    let margin = (r / 8) as i64;
    let max_speed = (r / 32).max(1) as i64;
    let mut clips = Vec::with_capacity(n_clips);
    let mut splits_txt = String::new();
    for (ci, &split) in splits.iter().enumerate() {
        let id = format!("clip{ci:03}");
        let velocity = loop {
            let v = (
                rng.random_range(-max_speed..=max_speed),
                rng.random_range(-max_speed..=max_speed),
            );
            if v != (0, 0) {
                break v;
            }
        };
        let span = |v: i64| v * (frames_per_clip as i64 - 1);
        let axis_start = |rng: &mut rng::Prng, v: i64| {
            let lo = margin - span(v).min(0);
            let hi = (r as i64 - 1 - margin) - span(v).max(0);
            if lo <= hi {
                rng.random_range(lo..=hi)
            } else {
                r as i64 / 2 - span(v) / 2
            }
        };
        let start = (
            axis_start(&mut rng, velocity.0),
            axis_start(&mut rng, velocity.1),
        );
        let scene = Scene {
            texture: texture(&mut rng, r),
            distractors: (0..DISTRACTORS)
                .map(|_| {
                    (
                        rng.random_range(margin..r as i64 - margin) as f64,
                        rng.random_range(margin..r as i64 - margin) as f64,
                    )
                })
                .collect(),
        };
        let clip = SyntheticClip {
            id: id.clone(),
            start,
            velocity,
            split,
        };
        let dir = out_dir.join(&id);
        for sub in ["frames", "gt", "fix", "teacher_spa", "teacher_tem"] {
            mkdir(&dir.join(sub))?;
        }
        let motion = (velocity.0 as f64, velocity.1 as f64);
        for t in 0..frames_per_clip {
            let c = clip.center(t);
            netpbm::write_ppm(
                &dir.join("frames").join(frame_name(t, "ppm")),
                &render(&scene, c, r),
            )?;
            let gt = gt_map(c, r);
            netpbm::write_pgm(&dir.join("gt").join(frame_name(t, "pgm")), &gt.to_tensor())?;
            let fix = sample_fixations(&gt, FIXATIONS_PER_FRAME, &mut rng);
            write_fixations(&dir.join("fix").join(frame_name(t, "txt")), &fix)?;
            let spa = synthetic_teacher(&gt, Branch::Spatial, motion);
            let tem = synthetic_teacher(&gt, Branch::Temporal, motion);
            netpbm::write_pgm(
                &dir.join("teacher_spa").join(frame_name(t, "pgm")),
                &spa.to_tensor(),
            )?;
            netpbm::write_pgm(
                &dir.join("teacher_tem").join(frame_name(t, "pgm")),
                &tem.to_tensor(),
            )?;
        }
        splits_txt.push_str(&format!("{id} {split}\n"));
        clips.push(clip);
    }
    let sp = out_dir.join("splits.txt");
    fs::write(&sp, splits_txt).map_err(|e| Error::io(&sp, e))?;
    Ok((load_dataset(out_dir)?, clips))
}
