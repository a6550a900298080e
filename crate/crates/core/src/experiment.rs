//! Training pipelines of the ablation variants, scored on a test split.

use std::fmt;

use crate::data::FrameSample;
use crate::distill::{
    self, AdamConfig, DistillConfig, JointConfig, TeacherProvider, DEFAULT_BATCH, DEFAULT_LR,
    DEFAULT_MU,
};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, Output};
use crate::model_io::Model;
use crate::networks::NetworkConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Both branches distilled, then transferred and fine-tuned.
    Distilled,
    /// As `Distilled` with `mu = 0`: ground truth only.
    Scratch,
    /// Student trained on the spatial branch loss alone; its spatial map is scored.
    SpatialOnly,
    /// Student trained on the temporal branch loss alone; its temporal map is scored.
    TemporalOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Distilled,
        Variant::Scratch,
        Variant::SpatialOnly,
        Variant::TemporalOnly,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Distilled => "dis",
            Variant::Scratch => "scratch",
            Variant::SpatialOnly => "spatial-only",
            Variant::TemporalOnly => "temporal-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub distill_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mu: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            distill_epochs: 5,
            joint_epochs: 10,
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            mu: DEFAULT_MU,
        }
    }
}

/// Trains `variant` from initialization `seed` and scores it on `test`.
pub fn run_variant<T: TeacherProvider + ?Sized>(
    variant: Variant,
    train: &[FrameSample],
    test: &[FrameSample],
    teachers: &T,
    net: &NetworkConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<EvalReport> {
    let adam = AdamConfig {
        lr: schedule.lr,
        ..AdamConfig::default()
    };
    let (mu, spatial_weight, temporal_weight) = match variant {
        Variant::Distilled => (schedule.mu, 1.0, 1.0),
        Variant::Scratch => (0.0, 1.0, 1.0),
        Variant::SpatialOnly => (schedule.mu, 1.0, 0.0),
        Variant::TemporalOnly => (schedule.mu, 0.0, 1.0),
    };
    let dc = DistillConfig {
        epochs: schedule.distill_epochs,
        batch_size: schedule.batch_size,
        adam,
        mu,
        seed,
        spatial_weight,
        temporal_weight,
    };
    let student = distill::train_distill(train, teachers, net, &dc)?.net;
    let (model, output) = match variant {
        Variant::Distilled | Variant::Scratch => {
            let jc = JointConfig {
                epochs: schedule.joint_epochs,
                batch_size: schedule.batch_size,
                adam,
                seed,
                freeze_encoder: false,
            };
            let joint = distill::transfer_and_finetune(&student, train, &jc)?.net;
            (Model::Spatiotemporal(joint), Output::Fused)
        }
        Variant::SpatialOnly => (Model::Student(student), Output::Spatial),
        Variant::TemporalOnly => (Model::Student(student), Output::Temporal),
    };
    evaluate(&model, output, test, seed)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
