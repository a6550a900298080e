use rand::Rng;
use uvanet::blocks::BlockKind;
use uvanet::data::FrameSample;
use uvanet::distill::*;
use uvanet::metrics::{FixationSet, SaliencyMap};
use uvanet::networks::{normalize_frame, NetworkConfig, StudentNet};
use uvanet::rng::seeded;
use uvanet::{Error, Graph, ParamStore, Shape, Tensor};

fn random_map(r: &mut impl Rng, w: usize, h: usize) -> Tensor {
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| {
        r.random_range(0.0..1.0)
    })
}

fn mean_sq(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64
}

#[test]
fn branch_loss_matches_hand_arithmetic() {
    let mut r = seeded(3);
    for _ in 0..20 {
        let p = random_map(&mut r, 7, 5);
        let y = random_map(&mut r, 7, 5);
        let t = random_map(&mut r, 7, 5);
        for mu in [0.0, 0.5, 1.0] {
            let mut g = Graph::new();
            let (vp, vy, vt) = (
                g.input(p.clone()),
                g.constant(y.clone()),
                g.constant(t.clone()),
            );
            let l = branch_loss(&mut g, vp, vy, vt, mu).unwrap();
            let hand = (1.0 - mu) * mean_sq(&p, &y) + mu * mean_sq(&p, &t);
            assert!((g.value(l).item().unwrap() - hand).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let (vp, vy, vt) = (
            g.input(p.clone()),
            g.constant(y.clone()),
            g.constant(t.clone()),
        );
        let j = joint_loss(&mut g, vp, vy).unwrap();
        let b0 = branch_loss(&mut g, vp, vy, vt, 0.0).unwrap();
        assert_eq!(g.value(j).item().unwrap(), g.value(b0).item().unwrap());
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let y = random_map(&mut seeded(1), 6, 6);
    let mut g = Graph::new();
    let (vp, vy) = (g.input(y.clone()), g.constant(y.clone()));
    let l = branch_loss(&mut g, vp, vy, vy, 0.5).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    let j = joint_loss(&mut g, vp, vy).unwrap();
    assert_eq!(g.value(j).item().unwrap(), 0.0);
    let mut g = Graph::new();
    let (vp, vy) = (g.input(y.clone()), g.constant(y));
    assert!(branch_loss(&mut g, vp, vy, vy, 1.5).is_err());
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut store = ParamStore::new();
    let a = store.add(
        "a",
        Tensor::new(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap(),
    );
    let frozen = store.add("b", Tensor::new(Shape::new(1, 1, 1, 1), vec![4.0]).unwrap());
    store.get_mut(frozen).trainable = false;
    store.tensor_mut(a).accumulate_grad(&[0.3, -7.0, 0.0]);
    store.tensor_mut(frozen).accumulate_grad(&[1.0]);
    let adam = AdamConfig::default();
    let mut st = TrainState::new(&store, adam, 0, 0.5);
    st.adam_step(&mut store).unwrap();
    let got = store.tensor(a).data().to_vec();
    let want = [
        1.0 - adam.lr * 0.3 / (0.3 + adam.eps),
        -2.0 + adam.lr * 7.0 / (7.0 + adam.eps),
        0.5,
    ];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-15, "{got:?}");
    }
    assert_eq!(store.tensor(frozen).data(), &[4.0]);

    // second step, hand-rolled moments
    store.zero_grad();
    store.tensor_mut(a).accumulate_grad(&[0.1, 0.0, 0.0]);
    st.adam_step(&mut store).unwrap();
    let (b1, b2) = (adam.beta1, adam.beta2);
    let m = b1 * (1.0 - b1) * 0.3 + (1.0 - b1) * 0.1;
    let v = b2 * (1.0 - b2) * 0.09 + (1.0 - b2) * 0.01;
    let step = adam.lr * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + adam.eps);
    assert!((store.tensor(a).data()[0] - (want[0] - step)).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_aborts_without_update() {
    let mut store = ParamStore::new();
    let a = store.add(
        "a",
        Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap(),
    );
    let b = store.add(
        "bad",
        Tensor::new(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap(),
    );
    store.tensor_mut(a).accumulate_grad(&[1.0, 1.0]);
    store.tensor_mut(b).accumulate_grad(&[f64::NAN]);
    let mut st = TrainState::new(&store, AdamConfig::default(), 0, 0.5);
    match st.adam_step(&mut store) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "bad"),
        other => panic!("{other:?}"),
    }
    assert_eq!(store.tensor(a).data(), &[1.0, 2.0]);
    assert_eq!(st.step, 0);
}

fn blob(r: usize, cx: usize, cy: usize) -> SaliencyMap {
    SaliencyMap::from_fn(r, r, |x, y| {
        let d = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
        (-d / 8.0).exp()
    })
}

#[test]
fn synthetic_teacher_follows_motion() {
    let y = blob(32, 12, 14);
    let spa = synthetic_teacher(&y, Branch::Spatial, (3.0, -2.0));
    assert_eq!(spa.argmax(), (12, 14));
    assert_eq!(spa.max(), 1.0);
    let tem = synthetic_teacher(&y, Branch::Temporal, (3.0, -2.0));
    assert_eq!(tem.argmax(), (15, 12));
    // blurred, so wider than the input
    assert!(spa.at(17, 14) > y.at(17, 14));
}

/// Frames with a bright square at a moving position; GT is a blob there.
fn toy_samples(n_clips: usize, frames: usize, r: usize) -> Vec<FrameSample> {
    let mut out = Vec::new();
    for c in 0..n_clips {
        let pos = |t: usize| (4 + 3 * c + t, 6 + 2 * t + c);
        let frame = |t: usize| {
            let (px, py) = pos(t);
            normalize_frame(&Tensor::from_fn(Shape::new(1, 3, r, r), |_, ch, y, x| {
                let on = x.abs_diff(px) <= 2 && y.abs_diff(py) <= 2;
                if on {
                    [0.9, 0.3, 0.2][ch]
                } else {
                    0.4
                }
            }))
        };
        for t in 0..frames - 1 {
            let (px, py) = pos(t);
            let gt = blob(r, px, py);
            out.push(FrameSample {
                clip: format!("c{c}"),
                index: t,
                frame_t: frame(t),
                frame_t1: frame(t + 1),
                fixations: FixationSet::new(r, r, vec![(px, py)]).unwrap(),
                gt,
            });
        }
    }
    out
}

#[test]
fn synthetic_provider_estimates_clip_motion() {
    let samples = toy_samples(2, 4, 32);
    let teacher = SyntheticTeacher::from_samples(&samples);
    let s = &samples[1];
    let tem = teacher.teacher_map("c0", 1, Branch::Temporal).unwrap();
    assert_eq!(tem, synthetic_teacher(&s.gt, Branch::Temporal, (1.0, 2.0)));
    assert!(teacher.teacher_map("c9", 0, Branch::Spatial).is_none());
}

struct NoTeacher;
impl TeacherProvider for NoTeacher {
    fn teacher_map(&self, _: &str, _: usize, _: Branch) -> Option<SaliencyMap> {
        None
    }
}

fn small_cfg(epochs: usize, mu: f64) -> DistillConfig {
    DistillConfig {
        epochs,
        batch_size: 4,
        mu,
        seed: 5,
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        ..DistillConfig::default()
    }
}

#[test]
fn missing_teacher_is_rejected_only_when_used() {
    let samples = toy_samples(1, 3, 32);
    let net = NetworkConfig::reference(32, BlockKind::CaRes);
    match train_distill(&samples, &NoTeacher, &net, &small_cfg(1, 0.5)) {
        Err(Error::MissingTeacher {
            clip,
            frame,
            branch,
        }) => {
            assert_eq!((clip.as_str(), frame, branch), ("c0", 0, "spatial"));
        }
        other => panic!("{:?}", other.map(|o| o.log)),
    }
    let out = train_distill(&samples, &NoTeacher, &net, &small_cfg(1, 0.0)).unwrap();
    assert_eq!(out.log.len(), 2);
    // a spatial-only run needs no temporal teacher
    let only = DistillConfig {
        temporal_weight: 0.0,
        ..small_cfg(1, 0.5)
    };
    let t = SyntheticTeacher::from_samples(&samples);
    struct SpatialOnly(SyntheticTeacher);
    impl TeacherProvider for SpatialOnly {
        fn teacher_map(&self, c: &str, f: usize, b: Branch) -> Option<SaliencyMap> {
            (b == Branch::Spatial)
                .then(|| self.0.teacher_map(c, f, b))
                .flatten()
        }
    }
    let out = train_distill(&samples, &SpatialOnly(t), &net, &only).unwrap();
    assert_eq!(out.log[1].temporal, 0.0);
}

#[test]
fn distillation_reduces_loss_and_is_deterministic() {
    let samples = toy_samples(3, 5, 32);
    let teacher = SyntheticTeacher::from_samples(&samples);
    let net = NetworkConfig::reference(32, BlockKind::CaRes);
    let cfg = small_cfg(6, 0.5);
    let a = train_distill(&samples, &teacher, &net, &cfg).unwrap();
    let b = train_distill(&samples, &teacher, &net, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    let (first, last) = (a.log[0], *a.log.last().unwrap());
    assert!(last.total(&cfg) < 0.5 * first.total(&cfg), "{:?}", a.log);
    assert_eq!(a.state.step, 6 * 3);
    for line in a.log.iter().map(ToString::to_string) {
        assert!(line.starts_with("epoch ") && line.contains(" l_spa ") && line.contains(" l_tem "));
    }
}

#[test]
fn transfer_copies_encoder_bit_exactly() {
    let cfg = NetworkConfig::reference(32, BlockKind::CaRes);
    let mut r = seeded(11);
    let student = StudentNet::new(cfg, &mut r).unwrap();
    let sp = transfer(&student, 2).unwrap();
    for _ in 0..10 {
        let a = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, _, _, _| {
            r.random_range(-0.5..0.5)
        });
        let b = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, _, _, _| {
            r.random_range(-0.5..0.5)
        });
        let mut g1 = Graph::new();
        let (a1, b1) = (g1.constant(a.clone()), g1.constant(b.clone()));
        let e1 = student.forward(&mut g1, a1, b1).unwrap().encoder;
        let mut g2 = Graph::new();
        let (a2, b2) = (g2.constant(a), g2.constant(b));
        let e2 = sp.forward(&mut g2, a2, b2).unwrap().encoder;
        for (x, y) in [
            (e1.spatial, e2.spatial),
            (e1.temporal, e2.temporal),
            (e1.low_t, e2.low_t),
        ] {
            let bits = |g: &Graph, v| {
                g.value(v)
                    .data()
                    .iter()
                    .map(|f: &f64| f.to_bits())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(&g1, x), bits(&g2, y));
        }
    }
}

#[test]
fn finetune_reduces_joint_loss_and_freeze_holds_encoder() {
    let samples = toy_samples(3, 5, 32);
    let cfg = NetworkConfig::reference(32, BlockKind::CaRes);
    let student = StudentNet::new(cfg, &mut seeded(4)).unwrap();
    let jc = JointConfig {
        epochs: 6,
        batch_size: 4,
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        seed: 1,
        freeze_encoder: false,
    };
    let out = transfer_and_finetune(&student, &samples, &jc).unwrap();
    assert!(
        out.log.last().unwrap().joint < 0.5 * out.log[0].joint,
        "{:?}",
        out.log
    );
    assert!(out.log[0].to_string().starts_with("epoch 0 l_sp "));

    let frozen = transfer_and_finetune(
        &student,
        &samples,
        &JointConfig {
            epochs: 1,
            freeze_encoder: true,
            ..jc
        },
    )
    .unwrap();
    for id in frozen.net.encoder_param_ids() {
        let name = &frozen.net.store.get(id).name;
        assert_eq!(
            frozen.net.store.tensor(id).data(),
            student.store.by_name(name).unwrap().tensor.data()
        );
    }
}
