//! Raw loop kernels behind the graph operators.
//!
//! All buffers are row-major `(b, c, h, w)`. Backward kernels accumulate into
//! their output slices so a node consumed twice sums both contributions.

use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// `floor((n + 2 pad - k) / stride) + 1`, or `None` when the window never fits.
pub fn conv_out_dim(n: usize, g: ConvGeom) -> Option<usize> {
    let padded = n + 2 * g.pad;
    if padded < g.kernel || g.stride == 0 {
        return None;
    }
    Some((padded - g.kernel) / g.stride + 1)
}

/// `(n - 1) stride - 2 pad + k`, as a signed value so callers can reject it.
pub fn conv_transpose_out_dim(n: usize, g: ConvGeom) -> i64 {
    (n as i64 - 1) * g.stride as i64 - 2 * g.pad as i64 + g.kernel as i64
}

/// Output columns `ox` for which `ox * stride + kx - pad` lands in `[0, w)`.
#[inline]
fn valid_range(out: usize, inp: usize, k_off: usize, g: ConvGeom) -> (usize, usize) {
    // ix = ox*s + k_off - pad >= 0  <=>  ox >= ceil((pad - k_off)/s)
    let lo = if k_off >= g.pad {
        0
    } else {
        (g.pad - k_off).div_ceil(g.stride)
    };
    // ix < inp  <=>  ox*s < inp + pad - k_off
    let bound = inp + g.pad;
    let hi = if bound <= k_off {
        0
    } else {
        ((bound - k_off - 1) / g.stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense cross-correlation. `weight` is `[co, ci, k, k]`.
pub fn conv2d_forward(
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
    g: ConvGeom,
    out_shape: Shape,
) -> Vec<f64> {
    let ci_n = in_shape.channels;
    let (h, w) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.kernel;
    let mut out = vec![0.0; out_shape.numel()];
    let pointwise = k == 1 && g.stride == 1 && g.pad == 0;
    for b in 0..in_shape.batch {
        for co in 0..out_channels {
            let o_base = (b * out_channels + co) * oh * ow;
            let o_plane = &mut out[o_base..o_base + oh * ow];
            if let Some(bias) = bias {
                o_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..ci_n {
                let i_base = (b * ci_n + ci) * h * w;
                let i_plane = &input[i_base..i_base + h * w];
                let w_base = (co * ci_n + ci) * k * k;
                if pointwise {
                    axpy(weight[w_base], i_plane, o_plane);
                    continue;
                }
                for ky in 0..k {
                    let (y0, y1) = valid_range(oh, h, ky, g);
                    for kx in 0..k {
                        let wv = weight[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(ow, w, kx, g);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut o_plane[oy * ow..(oy + 1) * ow];
                            let irow = &i_plane[iy * w..(iy + 1) * w];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                axpy(wv, &irow[ix0..ix0 + (x1 - x0)], &mut orow[x0..x1]);
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    out_shape: Shape,
    g: ConvGeom,
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let ci_n = in_shape.channels;
    let co_n = out_shape.channels;
    let (h, w) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.kernel;
    let pointwise = k == 1 && g.stride == 1 && g.pad == 0;

    if let Some(gb) = grad_b {
        for b in 0..in_shape.batch {
            for (co, acc) in gb.iter_mut().enumerate().take(co_n) {
                let base = (b * co_n + co) * oh * ow;
                *acc += grad_out[base..base + oh * ow].iter().sum::<f64>();
            }
        }
    }

    if let Some(gw) = grad_w {
        for b in 0..in_shape.batch {
            for co in 0..co_n {
                let o_base = (b * co_n + co) * oh * ow;
                let go = &grad_out[o_base..o_base + oh * ow];
                for ci in 0..ci_n {
                    let i_base = (b * ci_n + ci) * h * w;
                    let ip = &input[i_base..i_base + h * w];
                    let w_base = (co * ci_n + ci) * k * k;
                    if pointwise {
                        gw[w_base] += dot(go, ip);
                        continue;
                    }
                    for ky in 0..k {
                        let (y0, y1) = valid_range(oh, h, ky, g);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(ow, w, kx, g);
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &go[oy * ow..(oy + 1) * ow];
                                let irow = &ip[iy * w..(iy + 1) * w];
                                if g.stride == 1 {
                                    let ix0 = x0 + kx - g.pad;
                                    acc += dot(&grow[x0..x1], &irow[ix0..ix0 + (x1 - x0)]);
                                } else {
                                    for ox in x0..x1 {
                                        acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                            gw[w_base + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
    }

    if let Some(gi) = grad_in {
        for b in 0..in_shape.batch {
            for co in 0..co_n {
                let o_base = (b * co_n + co) * oh * ow;
                let go = &grad_out[o_base..o_base + oh * ow];
                for ci in 0..ci_n {
                    let i_base = (b * ci_n + ci) * h * w;
                    let gip = &mut gi[i_base..i_base + h * w];
                    let w_base = (co * ci_n + ci) * k * k;
                    if pointwise {
                        axpy(weight[w_base], go, gip);
                        continue;
                    }
                    for ky in 0..k {
                        let (y0, y1) = valid_range(oh, h, ky, g);
                        for kx in 0..k {
                            let wv = weight[w_base + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (x0, x1) = valid_range(ow, w, kx, g);
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &go[oy * ow..(oy + 1) * ow];
                                let irow = &mut gip[iy * w..(iy + 1) * w];
                                if g.stride == 1 {
                                    let ix0 = x0 + kx - g.pad;
                                    axpy(wv, &grow[x0..x1], &mut irow[ix0..ix0 + (x1 - x0)]);
                                } else {
                                    for ox in x0..x1 {
                                        irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel cross-correlation. `weight` is `[c, 1, k, k]`.
pub fn depthwise_forward(
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: ConvGeom,
    out_shape: Shape,
) -> Vec<f64> {
    let c_n = in_shape.channels;
    let (h, w) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.kernel;
    let mut out = vec![0.0; out_shape.numel()];
    for b in 0..in_shape.batch {
        for c in 0..c_n {
            let o_base = (b * c_n + c) * oh * ow;
            let o_plane = &mut out[o_base..o_base + oh * ow];
            if let Some(bias) = bias {
                o_plane.iter_mut().for_each(|v| *v = bias[c]);
            }
            let i_base = (b * c_n + c) * h * w;
            let ip = &input[i_base..i_base + h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, h, ky, g);
                for kx in 0..k {
                    let wv = weight[c * k * k + ky * k + kx];
                    let (x0, x1) = valid_range(ow, w, kx, g);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut o_plane[oy * ow..(oy + 1) * ow];
                        let irow = &ip[iy * w..(iy + 1) * w];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.pad;
                            axpy(wv, &irow[ix0..ix0 + (x1 - x0)], &mut orow[x0..x1]);
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    grad_out: &[f64],
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    out_shape: Shape,
    g: ConvGeom,
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let c_n = in_shape.channels;
    let (h, w) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.kernel;
    for b in 0..in_shape.batch {
        for c in 0..c_n {
            let o_base = (b * c_n + c) * oh * ow;
            let go = &grad_out[o_base..o_base + oh * ow];
            if let Some(gb) = grad_b.as_deref_mut() {
                gb[c] += go.iter().sum::<f64>();
            }
            let i_base = (b * c_n + c) * h * w;
            let ip = &input[i_base..i_base + h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, h, ky, g);
                for kx in 0..k {
                    let wi = c * k * k + ky * k + kx;
                    let (x0, x1) = valid_range(ow, w, kx, g);
                    if let Some(gw) = grad_w.as_deref_mut() {
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            let irow = &ip[iy * w..(iy + 1) * w];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                acc += dot(&grow[x0..x1], &irow[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                    if let Some(gi) = grad_in.as_deref_mut() {
                        let wv = weight[wi];
                        let gip = &mut gi[i_base..i_base + h * w];
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            let irow = &mut gip[iy * w..(iy + 1) * w];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                axpy(wv, &grow[x0..x1], &mut irow[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution. `weight` is `[ci, co, k, k]`; each input pixel
/// scatters a `k x k` patch into the output at `iy * stride + ky - pad`.
pub fn conv_transpose_forward(
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: ConvGeom,
    out_shape: Shape,
) -> Vec<f64> {
    let ci_n = in_shape.channels;
    let co_n = out_shape.channels;
    let (h, w) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.kernel;
    let mut out = vec![0.0; out_shape.numel()];
    for b in 0..in_shape.batch {
        for co in 0..co_n {
            let o_base = (b * co_n + co) * oh * ow;
            let op = &mut out[o_base..o_base + oh * ow];
            if let Some(bias) = bias {
                op.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..ci_n {
                let i_base = (b * ci_n + ci) * h * w;
                let ip = &input[i_base..i_base + h * w];
                let w_base = (ci * co_n + co) * k * k;
                for ky in 0..k {
                    // oy = iy*s + ky - pad in [0, oh): same window algebra as conv,
                    // with the roles of input and output swapped.
                    let (y0, y1) = valid_range(h, oh, ky, g);
                    for kx in 0..k {
                        let wv = weight[w_base + ky * k + kx];
                        let (x0, x1) = valid_range(w, ow, kx, g);
                        for iy in y0..y1 {
                            let oy = iy * g.stride + ky - g.pad;
                            let irow = &ip[iy * w..(iy + 1) * w];
                            let orow = &mut op[oy * ow..(oy + 1) * ow];
                            for ix in x0..x1 {
                                orow[ix * g.stride + kx - g.pad] += wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    grad_out: &[f64],
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    out_shape: Shape,
    g: ConvGeom,
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let ci_n = in_shape.channels;
    let co_n = out_shape.channels;
    let (h, w) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.kernel;
    for b in 0..in_shape.batch {
        for co in 0..co_n {
            let o_base = (b * co_n + co) * oh * ow;
            let go = &grad_out[o_base..o_base + oh * ow];
            if let Some(gb) = grad_b.as_deref_mut() {
                gb[co] += go.iter().sum::<f64>();
            }
            for ci in 0..ci_n {
                let i_base = (b * ci_n + ci) * h * w;
                let ip = &input[i_base..i_base + h * w];
                let w_base = (ci * co_n + co) * k * k;
                for ky in 0..k {
                    let (y0, y1) = valid_range(h, oh, ky, g);
                    for kx in 0..k {
                        let wi = w_base + ky * k + kx;
                        let (x0, x1) = valid_range(w, ow, kx, g);
                        let wv = weight[wi];
                        let mut acc = 0.0;
                        for iy in y0..y1 {
                            let oy = iy * g.stride + ky - g.pad;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            let irow = &ip[iy * w..(iy + 1) * w];
                            for ix in x0..x1 {
                                acc += irow[ix] * grow[ix * g.stride + kx - g.pad];
                            }
                            if let Some(gi) = grad_in.as_deref_mut() {
                                let girow = &mut gi[i_base + iy * w..i_base + (iy + 1) * w];
                                for ix in x0..x1 {
                                    girow[ix] += wv * grow[ix * g.stride + kx - g.pad];
                                }
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            gw[wi] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// `out[b, o] = bias[o] + sum_c weight[o, c] * input[b, c]`.
pub fn fc_forward(
    input: &[f64],
    batch: usize,
    in_f: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let out_f = bias.len();
    let mut out = vec![0.0; batch * out_f];
    for b in 0..batch {
        let x = &input[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            out[b * out_f + o] = bias[o] + dot(&weight[o * in_f..(o + 1) * in_f], x);
        }
    }
    out
}
