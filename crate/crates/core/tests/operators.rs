// Oracles index explicitly to mirror the textbook sums.
#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::Rng;
use uvanet::gradcheck::check_gradients;
use uvanet::rng::seeded;
use uvanet::{Graph, ParamStore, PoolMode, Shape, Tensor, TensorError};

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

// ---- naive oracles ---------------------------------------------------------

fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.height;
    let oh = (xs.height + 2 * pad - k) / stride + 1;
    let ow = (xs.width + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.batch, ws.batch, oh, ow));
    for b in 0..xs.batch {
        for co in 0..ws.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..xs.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0
                                    || ix < 0
                                    || iy >= xs.height as i64
                                    || ix >= xs.width as i64
                                {
                                    continue;
                                }
                                s += w.at(co, ci, ky, kx) * x.at(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, co, oy, ox, s);
                }
            }
        }
    }
    out
}

fn naive_depthwise(x: &Tensor, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let k = w.shape().height;
    let planes: Vec<Tensor> = (0..xs.channels)
        .map(|c| {
            let xc = x.slice_channels(c, 1).unwrap();
            let wc = Tensor::from_fn(Shape::new(1, 1, k, k), |_, _, y, xx| w.at(c, 0, y, xx));
            naive_conv(&xc, &wc, &[bias[c]], stride, pad)
        })
        .collect();
    let ps = planes[0].shape();
    Tensor::from_fn(
        Shape::new(xs.batch, xs.channels, ps.height, ps.width),
        |b, c, y, xx| planes[c].at(b, 0, y, xx),
    )
}

/// Transposed convolution written as the adjoint of the naive convolution:
/// `<conv(y), x> = <y, conv_t(x)>` for every basis vector `y`.
fn adjoint_conv_transpose(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape(); // [ci, co, k, k]
    let k = ws.height;
    let oh = (xs.height - 1) * stride + k - 2 * pad;
    let ow = (xs.width - 1) * stride + k - 2 * pad;
    let out_shape = Shape::new(xs.batch, ws.channels, oh, ow);
    let zero_bias = vec![0.0; ws.batch];
    let mut out = Tensor::zeros(out_shape);
    for b in 0..xs.batch {
        for co in 0..ws.channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut e = Tensor::zeros(Shape::new(1, ws.channels, oh, ow));
                    e.set(0, co, y, xx, 1.0);
                    let conv_e = naive_conv(&e, w, &zero_bias, stride, pad);
                    let mut s = 0.0;
                    for ci in 0..xs.channels {
                        for iy in 0..xs.height {
                            for ix in 0..xs.width {
                                s += conv_e.at(0, ci, iy, ix) * x.at(b, ci, iy, ix);
                            }
                        }
                    }
                    out.set(b, co, y, xx, s);
                }
            }
        }
    }
    out
}

fn eval1(
    x: Tensor,
    f: impl FnOnce(&mut Graph, uvanet::Var) -> Result<uvanet::Var, TensorError>,
) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v).unwrap();
    g.value(out).clone()
}

// ---- conv2d ----------------------------------------------------------------

#[test]
fn conv2d_scalar_scaling() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
    let w = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
    let b = g.constant(Tensor::zeros(Shape::vector(1)));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &Tensor::full(Shape::new(1, 1, 3, 3), 2.0));
}

#[test]
fn conv2d_identity_kernel() {
    let x = random(Shape::new(1, 1, 3, 3), 1);
    let mut k = Tensor::zeros(Shape::new(1, 1, 3, 3));
    k.set(0, 0, 1, 1, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(k);
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_matches_naive_loops() {
    let x = random(Shape::new(1, 2, 5, 5), 2);
    let w = random(Shape::new(3, 2, 3, 3), 3);
    let bias = [0.1, -0.2, 0.3];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(Tensor::new(Shape::vector(3), bias.to_vec()).unwrap());
    let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
    let want = naive_conv(&x, &w, &bias, 2, 1);
    assert_eq!(g.shape(y), Shape::new(1, 3, 3, 3));
    assert!(g.value(y).max_abs_diff(&want) < 1e-12);

    // also the 1x1 fast path and a batched, asymmetric case
    for (stride, pad, k, h, wd) in [(1, 0, 1, 4, 6), (1, 2, 3, 5, 4), (3, 1, 4, 9, 7)] {
        let x = random(Shape::new(2, 3, h, wd), 10 + k as u64);
        let w = random(Shape::new(4, 3, k, k), 20 + k as u64);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let want = naive_conv(&x, &w, &[0.0; 4], stride, pad);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert_eq!(
        err,
        TensorError::Mismatch {
            op: "conv2d",
            dim: "input channels",
            expected: 3,
            actual: 2
        }
    );
    assert!(err.to_string().contains("input channels"));
    let w = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    assert!(g.conv2d(x, w, None, 0, 1).is_err());
}

// ---- depthwise -------------------------------------------------------------

#[test]
fn depthwise_identity_kernels() {
    let x = random(Shape::new(2, 4, 5, 6), 4);
    let mut k = Tensor::zeros(Shape::new(4, 1, 3, 3));
    for c in 0..4 {
        k.set(c, 0, 1, 1, 1.0);
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(k);
    let y = g.depthwise_conv2d(xv, wv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn depthwise_zero_channel_is_bias_only() {
    let mut x = random(Shape::new(1, 2, 5, 5), 5);
    for y in 0..5 {
        for xx in 0..5 {
            x.set(0, 1, y, xx, 0.0);
        }
    }
    let w = random(Shape::new(2, 1, 3, 3), 6);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.constant(w);
    let bv = g.constant(Tensor::new(Shape::vector(2), vec![0.25, -0.75]).unwrap());
    let y = g.depthwise_conv2d(xv, wv, Some(bv), 1, 1).unwrap();
    let out = g.value(y).slice_channels(1, 1).unwrap();
    assert!(out.data().iter().all(|&v| v == -0.75));
}

#[test]
fn depthwise_matches_naive_loops() {
    let x = random(Shape::new(1, 3, 6, 6), 7);
    let w = random(Shape::new(3, 1, 3, 3), 8);
    let bias = [0.5, 0.0, -0.5];
    for stride in [1, 2] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(Tensor::new(Shape::vector(3), bias.to_vec()).unwrap());
        let y = g.depthwise_conv2d(xv, wv, Some(bv), stride, 1).unwrap();
        let want = naive_depthwise(&x, &w, &bias, stride, 1);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn depthwise_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let w = g.constant(Tensor::zeros(Shape::new(2, 1, 3, 3)));
    assert!(matches!(
        g.depthwise_conv2d(x, w, None, 1, 1),
        Err(TensorError::Mismatch {
            dim: "channels",
            ..
        })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn depthwise_channel_locality(seed in 0u64..10_000, target in 0usize..3, bump in -3.0f64..3.0) {
        let x = random(Shape::new(1, 3, 5, 5), seed);
        let w = random(Shape::new(3, 1, 3, 3), seed + 1);
        let mut perturbed = x.clone();
        let other = (target + 1) % 3;
        for y in 0..5 { for xx in 0..5 {
            let v = perturbed.at(0, other, y, xx);
            perturbed.set(0, other, y, xx, v + bump);
        }}
        let run = |inp: Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(inp);
            let wv = g.constant(w.clone());
            let y = g.depthwise_conv2d(xv, wv, None, 2, 1).unwrap();
            g.value(y).slice_channels(target, 1).unwrap()
        };
        prop_assert_eq!(run(x), run(perturbed));
    }
}

// ---- conv2d_transpose ------------------------------------------------------

#[test]
fn conv_transpose_single_pixel_broadcast() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    let w = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let y = g.conv2d_transpose(x, w, None, 2, 0).unwrap();
    assert_eq!(g.value(y), &Tensor::ones(Shape::new(1, 1, 2, 2)));
}

#[test]
fn conv_transpose_restores_stride2_shape() {
    for h in [8usize, 16, 32, 64] {
        let mut g = Graph::new();
        let x = g.constant(random(Shape::new(1, 2, h, h), h as u64));
        let w = g.constant(random(Shape::new(3, 2, 4, 4), 1));
        let down = g.conv2d(x, w, None, 2, 1).unwrap();
        let wt = g.constant(random(Shape::new(3, 2, 4, 4), 2));
        let up = g.conv2d_transpose(down, wt, None, 2, 1).unwrap();
        assert_eq!(g.shape(up), Shape::new(1, 2, h, h));
    }
}

#[test]
fn conv_transpose_matches_adjoint_oracle() {
    for (stride, pad, k) in [(2, 1, 4), (4, 2, 8), (1, 0, 3), (3, 1, 3)] {
        let x = random(Shape::new(2, 2, 3, 4), 30 + k as u64);
        let w = random(Shape::new(2, 3, k, k), 40 + k as u64);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d_transpose(xv, wv, None, stride, pad).unwrap();
        let want = adjoint_conv_transpose(&x, &w, stride, pad);
        assert_eq!(g.shape(y), want.shape());
        assert!(
            g.value(y).max_abs_diff(&want) < 1e-12,
            "s={stride} p={pad} k={k}"
        );
    }
}

#[test]
fn conv_transpose_rejects_non_positive_output() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    let w = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    assert!(matches!(
        g.conv2d_transpose(x, w, None, 1, 1),
        Err(TensorError::NonPositiveOutput { .. })
    ));
}

// ---- pooling, pointwise, binary, concat, fc ---------------------------------

#[test]
fn pooling_examples() {
    let seven = Tensor::full(Shape::new(1, 1, 3, 3), 7.0);
    assert_eq!(
        eval1(seven.clone(), |g, v| g.pool_global(v, PoolMode::Avg)).data(),
        &[7.0]
    );
    assert_eq!(
        eval1(seven, |g, v| g.pool_global(v, PoolMode::Max)).data(),
        &[7.0]
    );
    let m = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(
        eval1(m.clone(), |g, v| g.pool_global(v, PoolMode::Avg)).data(),
        &[2.5]
    );
    assert_eq!(
        eval1(m, |g, v| g.pool_global(v, PoolMode::Max)).data(),
        &[4.0]
    );

    let mut g = Graph::new();
    let e = g.constant(Tensor::zeros(Shape::new(1, 1, 0, 3)));
    assert!(matches!(
        g.pool_global(e, PoolMode::Avg),
        Err(TensorError::EmptySpatial { .. })
    ));
}

#[test]
fn pooling_backward_routes() {
    let mut store = ParamStore::new();
    let x = store.add(
        "x",
        Tensor::new(Shape::new(1, 1, 2, 2), vec![5.0, 1.0, 5.0, 2.0]).unwrap(),
    );
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let avg = g.pool_global(xv, PoolMode::Avg).unwrap();
    let mx = g.pool_global(xv, PoolMode::Max).unwrap();
    let s_avg = g.scale(avg, 3.0).unwrap();
    let total = g.add(s_avg, mx).unwrap();
    let loss = g.sum(total).unwrap();
    let grads = g.backward(loss, &mut store).unwrap();
    // avg: 3/4 everywhere; max: tie at indices 0 and 2, first one wins
    assert_eq!(grads.get(xv).unwrap(), &[0.75 + 1.0, 0.75, 0.75, 0.75]);
}

#[test]
fn pointwise_examples() {
    let x = Tensor::new(Shape::new(1, 1, 1, 4), vec![0.0, -1.0, 3.0, 9.0]).unwrap();
    let s = eval1(x.clone(), |g, v| g.sigmoid(v));
    assert_eq!(s.data()[0], 0.5);
    let r = eval1(x, |g, v| g.relu6(v));
    assert_eq!(r.data(), &[0.0, 0.0, 3.0, 6.0]);
}

#[test]
fn pointwise_gradients_match_central_differences() {
    for f in [uvanet::Activation::Relu6, uvanet::Activation::Sigmoid] {
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Tensor::new(Shape::new(1, 1, 1, 3), vec![-2.0, 0.3, 5.9]).unwrap(),
        );
        let loss_fn = |s: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.param(s, x);
            let y = g.activation(xv, f)?;
            let sq = g.mul(y, y)?;
            let l = g.sum(sq)?;
            Ok::<_, uvanet::Error>((g, l))
        };
        let (g, l) = loss_fn(&store).unwrap();
        g.backward(l, &mut store).unwrap();
        let analytic = store.tensor(x).grad().unwrap().to_vec();
        for i in 0..3 {
            let h = 1e-6;
            let mut plus = store.clone();
            plus.tensor_mut(x).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.tensor_mut(x).data_mut()[i] -= h;
            let fp = {
                let (g, l) = loss_fn(&plus).unwrap();
                g.value(l).item().unwrap()
            };
            let fm = {
                let (g, l) = loss_fn(&minus).unwrap();
                g.value(l).item().unwrap()
            };
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs());
            if denom == 0.0 {
                continue;
            }
            assert!((analytic[i] - numeric).abs() / denom < 1e-6, "{f:?} at {i}");
        }
    }
}

#[test]
fn binary_identities_and_broadcast() {
    let x = random(Shape::new(2, 3, 4, 5), 50);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ones = g.constant(Tensor::ones(Shape::new(2, 3, 1, 1)));
    let zeros = g.constant(Tensor::zeros(x.shape()));
    let m = g.mul(xv, ones).unwrap();
    let a = g.add(xv, zeros).unwrap();
    assert_eq!(g.value(m), &x);
    assert_eq!(g.value(a), &x);

    let att = random(Shape::new(2, 3, 1, 1), 51);
    let tiled = Tensor::from_fn(x.shape(), |b, c, _, _| att.at(b, c, 0, 0));
    let av = g.constant(att);
    let tv = g.constant(tiled);
    let bm = g.mul(xv, av).unwrap();
    let tm = g.mul(xv, tv).unwrap();
    assert_eq!(g.value(bm), g.value(tm));

    let bad = g.constant(Tensor::zeros(Shape::new(2, 3, 4, 4)));
    assert!(g.add(xv, bad).is_err());
    let bad = g.constant(Tensor::zeros(Shape::new(2, 2, 1, 1)));
    assert!(g.mul(xv, bad).is_err());
}

#[test]
fn concat_and_slice() {
    let x = random(Shape::new(2, 3, 4, 4), 60);
    let y = random(Shape::new(2, 5, 4, 4), 61);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let xx = g.concat_channels(xv, xv).unwrap();
    assert_eq!(g.shape(xx).channels, 6);
    assert_eq!(g.value(xx).slice_channels(0, 3).unwrap(), x);
    assert_eq!(g.value(xx).slice_channels(3, 3).unwrap(), x);
    let xy = g.concat_channels(xv, yv).unwrap();
    let a = g.slice_channels(xy, 0, 3).unwrap();
    let b = g.slice_channels(xy, 3, 5).unwrap();
    assert_eq!(g.value(a), &x);
    assert_eq!(g.value(b), &y);
    let bad = g.constant(Tensor::zeros(Shape::new(2, 1, 4, 3)));
    assert!(g.concat_channels(xv, bad).is_err());
}

#[test]
fn concat_backward_splits_at_channel_boundary() {
    let mut store = ParamStore::new();
    let a = store.add("a", random(Shape::new(1, 2, 2, 2), 62));
    let b = store.add("b", random(Shape::new(1, 3, 2, 2), 63));
    let weights = random(Shape::new(1, 5, 2, 2), 64);
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let bv = g.param(&store, b);
    let c = g.concat_channels(av, bv).unwrap();
    let wv = g.constant(weights.clone());
    let p = g.mul(c, wv).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l, &mut store).unwrap();
    assert_eq!(grads.get(av).unwrap(), &weights.data()[..8]);
    assert_eq!(grads.get(bv).unwrap(), &weights.data()[8..]);
}

#[test]
fn fully_connected_examples() {
    let x = random(Shape::new(2, 4, 1, 1), 70);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let eye = g.constant(Tensor::from_fn(Shape::new(4, 4, 1, 1), |o, c, _, _| {
        if o == c {
            1.0
        } else {
            0.0
        }
    }));
    let zb = g.constant(Tensor::zeros(Shape::vector(4)));
    let y = g.fully_connected(xv, eye, zb).unwrap();
    assert_eq!(g.value(y), &x);

    let zw = g.constant(Tensor::zeros(Shape::new(3, 4, 1, 1)));
    let beta = Tensor::new(Shape::vector(3), vec![1.5, -2.0, 0.25]).unwrap();
    let bv = g.constant(beta);
    let y = g.fully_connected(xv, zw, bv).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]);

    let w = random(Shape::new(3, 4, 1, 1), 71);
    let bias = [0.1, 0.2, 0.3];
    let wv = g.constant(w.clone());
    let bv = g.constant(Tensor::new(Shape::vector(3), bias.to_vec()).unwrap());
    let y = g.fully_connected(xv, wv, bv).unwrap();
    for b in 0..2 {
        for o in 0..3 {
            let mut s = bias[o];
            for c in 0..4 {
                s += w.at(o, c, 0, 0) * x.at(b, c, 0, 0);
            }
            assert!((g.value(y).at(b, o, 0, 0) - s).abs() < 1e-12);
        }
    }

    let sp = g.constant(Tensor::zeros(Shape::new(1, 4, 2, 1)));
    assert!(matches!(
        g.fully_connected(sp, wv, bv),
        Err(TensorError::InvalidArgument { .. })
    ));
}

// ---- backward --------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones_and_disconnected_is_zero() {
    let mut store = ParamStore::new();
    let x = store.add("x", random(Shape::new(1, 2, 3, 3), 80));
    let p = store.add("p", random(Shape::new(1, 1, 2, 2), 81));
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let _pv = g.param(&store, p);
    let l = g.sum(xv).unwrap();
    g.backward(l, &mut store).unwrap();
    assert!(store.tensor(x).grad().unwrap().iter().all(|&v| v == 1.0));
    assert!(store
        .tensor(p)
        .grad()
        .unwrap_or(&[0.0; 4])
        .iter()
        .all(|&v| v == 0.0));

    // repeated backward accumulates
    g.backward(l, &mut store).unwrap();
    assert!(store.tensor(x).grad().unwrap().iter().all(|&v| v == 2.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(matches!(
        g.backward(x, &mut store),
        Err(TensorError::NotScalar(_))
    ));
}

/// Every operator in one graph, checked on at least 20 random entries per
/// parameter tensor.
#[test]
fn every_operator_matches_finite_differences() {
    let mut rng = seeded(99);
    let mut store = ParamStore::new();
    let mut add = |name: &str, shape: Shape, seed: u64| store.add(name, random(shape, seed));
    let x = add("x", Shape::new(2, 2, 6, 6), 1);
    let cw = add("conv.w", Shape::new(3, 2, 3, 3), 2);
    let cb = add("conv.b", Shape::vector(3), 3);
    let dw = add("dw.w", Shape::new(3, 1, 3, 3), 4);
    let db = add("dw.b", Shape::vector(3), 5);
    let gamma = add("aff.scale", Shape::vector(3), 6);
    let beta = add("aff.shift", Shape::vector(3), 7);
    let f1w = add("fc1.w", Shape::new(2, 3, 1, 1), 8);
    let f1b = add("fc1.b", Shape::vector(2), 9);
    let f2w = add("fc2.w", Shape::new(3, 2, 1, 1), 10);
    let f2b = add("fc2.b", Shape::vector(3), 11);
    let tw = add("deconv.w", Shape::new(6, 1, 4, 4), 12);
    let tb = add("deconv.b", Shape::vector(1), 13);
    let target = random(Shape::new(2, 1, 6, 6), 14);

    let loss_fn = |s: &ParamStore| {
        let mut g = Graph::new();
        let xv = g.param(s, x);
        let c = {
            let (w, b) = (g.param(s, cw), g.param(s, cb));
            g.conv2d(xv, w, Some(b), 1, 1)?
        };
        let c = {
            let (sc, sh) = (g.param(s, gamma), g.param(s, beta));
            g.channel_affine(c, sc, sh)?
        };
        let c = g.relu6(c)?;
        let d = {
            let (w, b) = (g.param(s, dw), g.param(s, db));
            g.depthwise_conv2d(c, w, Some(b), 2, 1)?
        };
        let avg = g.pool_global(d, PoolMode::Avg)?;
        let mx = g.pool_global(d, PoolMode::Max)?;
        let mlp = |g: &mut Graph, v| -> Result<_, TensorError> {
            let (w1, b1, w2, b2) = (
                g.param(s, f1w),
                g.param(s, f1b),
                g.param(s, f2w),
                g.param(s, f2b),
            );
            let h = g.fully_connected(v, w1, b1)?;
            let h = g.relu6(h)?;
            g.fully_connected(h, w2, b2)
        };
        let ma = mlp(&mut g, avg)?;
        let mm = mlp(&mut g, mx)?;
        let att = g.add(ma, mm)?;
        let att = g.sigmoid(att)?;
        let gated = g.mul(d, att)?;
        let diff = g.sub(d, gated)?;
        let cat = g.concat_channels(gated, diff)?;
        let up = {
            let (w, b) = (g.param(s, tw), g.param(s, tb));
            g.conv2d_transpose(cat, w, Some(b), 2, 1)?
        };
        let up = g.sigmoid(up)?;
        let tv = g.constant(target.clone());
        let l = g.mse(up, tv)?;
        let l = g.scale(l, 10.0)?;
        Ok::<_, uvanet::Error>((g, l))
    };
    let n = store.len() * 20;
    let report = check_gradients(&mut store, loss_fn, n, 1e-5, &mut rng).unwrap();
    assert!(report.len() >= n);
    let worst = report.worst().unwrap();
    assert!(report.max_rel_err() < 1e-4, "worst: {worst:?}");
    assert!(store.iter().all(|(_, p)| p.tensor.is_finite()));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(random(Shape::new(1, 3, 9, 9), 90));
        let w = g.constant(random(Shape::new(4, 3, 3, 3), 91));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let p = g.pool_global(y, PoolMode::Max).unwrap();
        let y = g.mul(y, p).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn flops_are_accumulated_per_node() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 16, 32, 32)));
    let w = g.constant(Tensor::zeros(Shape::new(16, 16, 3, 3)));
    let b = g.constant(Tensor::zeros(Shape::vector(16)));
    g.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(g.flops(), 2 * 9 * 16 * 16 * 32 * 32 + 16 * 32 * 32);
}

#[test]
fn peak_activation_tracks_live_tensors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 4))); // 16
    let a = g.relu6(x).unwrap(); // 16, x dies after
    let b = g.relu6(a).unwrap(); // 16, a dies after
    let _c = g.add(a, b); // a still needed here: x gone, a + b + c live
                          // the store is empty: parameters never count
    assert_eq!(g.peak_activation_bytes(8), 3 * 16 * 8);
}
