//! Single-threaded inference timing and analytic memory estimates.

use std::fmt;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model_io::{encode_model, Model};
use crate::rng;
use crate::tensor::{Shape, Tensor};

pub const MIN_WARMUP: usize = 5;
pub const MIN_REPEATS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub resolution: usize,
    pub params: usize,
    pub model_bytes: usize,
    pub median_ms: f64,
    pub fps: f64,
    pub peak_activation_bytes: usize,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "resolution {}", self.resolution)?;
        writeln!(f, "params {}", self.params)?;
        writeln!(f, "model_bytes {}", self.model_bytes)?;
        writeln!(f, "median_ms {:.6}", self.median_ms)?;
        writeln!(f, "fps {:.3}", self.fps)?;
        writeln!(f, "peak_activation_bytes {}", self.peak_activation_bytes)
    }
}

fn random_frame(resolution: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, resolution, resolution), |_, _, _, _| {
        rng.random_range(-0.5..0.5)
    })
}

fn infer(model: &Model, a: &Tensor, b: &Tensor) -> Result<Graph> {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    match model {
        Model::Student(n) => {
            n.forward(&mut g, va, vb)?;
        }
        Model::Spatiotemporal(n) => {
            n.forward(&mut g, va, vb)?;
        }
    }
    Ok(g)
}

/// Peak live activation bytes of one `f64` inference at the model's resolution.
pub fn activation_memory(model: &Model) -> Result<usize> {
    let r = model.config().input_resolution;
    let frame = Tensor::zeros(Shape::new(1, 3, r, r));
    Ok(infer(model, &frame, &frame)?.peak_activation_bytes(8))
}

/// Times `repeats` inferences on one frame pair after [`MIN_WARMUP`] untimed runs.
pub fn bench_fps(model: &Model, resolution: usize, repeats: usize) -> Result<BenchReport> {
    if model.config().input_resolution != resolution {
        return Err(Error::Resolution {
            expected: model.config().input_resolution,
            actual: resolution,
        });
    }
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!(
            "need at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    let mut r = rng::seeded(resolution as u64);
    let a = random_frame(resolution, &mut r);
    let b = random_frame(resolution, &mut r);
    let mut peak = 0;
    for _ in 0..MIN_WARMUP {
        peak = infer(model, &a, &b)?.peak_activation_bytes(8);
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let g = infer(model, &a, &b)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        drop(g);
    }
    times.sort_by(f64::total_cmp);
    let median_ms = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    Ok(BenchReport {
        resolution,
        params: model.store().scalar_count(),
        model_bytes: encode_model(model).len(),
        median_ms,
        fps: 1000.0 / median_ms,
        peak_activation_bytes: peak,
    })
}
