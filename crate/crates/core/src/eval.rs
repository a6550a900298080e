//! Test-split evaluation and map prediction.

use std::fmt;

use crate::data::FrameSample;
use crate::error::{Error, Result};
use crate::metrics::{score_frame, FixationSet, FrameScores, SaliencyMap};
use crate::model_io::Model;

/// Which map of a model is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Fused,
    Spatial,
    Temporal,
}

impl fmt::Display for Output {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Output::Fused => "fused",
            Output::Spatial => "spatial",
            Output::Temporal => "temporal",
        })
    }
}

impl std::str::FromStr for Output {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Output::Fused),
            "spatial" => Ok(Output::Spatial),
            "temporal" => Ok(Output::Temporal),
            other => Err(Error::Config(format!("unknown output `{other}`"))),
        }
    }
}

impl Output {
    /// The fused map for a spatiotemporal model, the spatial map for a student.
    pub fn default_for(model: &Model) -> Self {
        match model {
            Model::Student(_) => Output::Spatial,
            Model::Spatiotemporal(_) => Output::Fused,
        }
    }
}

pub fn predict_map(model: &Model, output: Output, sample: &FrameSample) -> Result<SaliencyMap> {
    let t = match (model, output) {
        (Model::Spatiotemporal(n), Output::Fused) => {
            n.predict(&sample.frame_t, &sample.frame_t1)?
        }
        (Model::Student(n), Output::Spatial) => {
            n.predict(&sample.frame_t, &sample.frame_t1)?.spatial_map
        }
        (Model::Student(n), Output::Temporal) => {
            n.predict(&sample.frame_t, &sample.frame_t1)?.temporal_map
        }
        (m, o) => {
            return Err(Error::Config(format!(
                "a {} model has no {o} output",
                m.kind()
            )))
        }
    };
    Ok(SaliencyMap::from_tensor(&t))
}

/// Per-metric means over the evaluated frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub means: FrameScores,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        FrameScores::NAMES
            .iter()
            .position(|&n| n == metric)
            .map(|i| self.means.values()[i])
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in FrameScores::NAMES.iter().zip(self.means.values()) {
            writeln!(f, "{name} {v:.6}")?;
        }
        Ok(())
    }
}

/// Scores `maps[i]` against `samples[i]`. Shuffled-AUC negatives for a frame
/// come from the fixations of every other clip in `samples`.
pub fn evaluate_maps(
    samples: &[FrameSample],
    maps: &[SaliencyMap],
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    if samples.len() != maps.len() {
        return Err(Error::Config(format!(
            "{} maps for {} samples",
            maps.len(),
            samples.len()
        )));
    }
    // A single-clip split has no other clips; fall back to its other frames.
    let single_clip = samples.iter().all(|o| o.clip == samples[0].clip);
    let mut sums = [0.0; 5];
    for (k, (s, m)) in samples.iter().zip(maps).enumerate() {
        let pool: Vec<FixationSet> = samples
            .iter()
            .enumerate()
            .filter(|&(j, o)| {
                if single_clip {
                    j != k
                } else {
                    o.clip != s.clip
                }
            })
            .map(|(_, o)| o.fixations.clone())
            .collect();
        let scores = score_frame(m, &s.gt, &s.fixations, &pool, seed.wrapping_add(k as u64))?;
        for (acc, v) in sums.iter_mut().zip(scores.values()) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    let [auc, sauc, nss, sim, cc] = sums.map(|v| v / n);
    Ok(EvalReport {
        frames: samples.len(),
        means: FrameScores {
            auc,
            sauc,
            nss,
            sim,
            cc,
        },
    })
}

pub fn evaluate(
    model: &Model,
    output: Output,
    samples: &[FrameSample],
    seed: u64,
) -> Result<EvalReport> {
    let maps = samples
        .iter()
        .map(|s| predict_map(model, output, s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_maps(samples, &maps, seed)
}
